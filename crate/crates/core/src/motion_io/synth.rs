//! Seeded synthetic motion for desk-scale experiments.
//!
//! Each user gets a [`UserSignature`]: a controller oscillation (frequency,
//! amplitude, axis mix, second harmonic, left/right lag) carried in the
//! heading frame of a slowly wandering and turning head. Each application
//! modulates that signature: an archetype part (controller amplitude, head
//! travel, head pitch) shared by all users, plus an idiosyncratic part
//! drawn per (user, app). `app_modulation` scales both; at 0 a user moves
//! identically in every application.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::quat::{add3, Quat};
use crate::util::{fnv1a, mix_seed};

use super::{
    write_recording, AppLabel, DatasetManifest, DevicePose, Frame, ManifestEntry, Recording,
    UserId,
};

/// Base controller oscillation amplitude as a fraction of arm length.
const OSC_FRACTION: f64 = 0.12;
/// Head drift amplitude (m) at head_travel_scale 1.
const HEAD_DRIFT: f64 = 0.15;
/// Heading sway amplitude (rad) at head_travel_scale 1.
const HEADING_SWAY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSignature {
    pub arm_length: f64,
    pub rest_height: f64,
    pub osc_freq: f64,
    pub phase: f64,
    pub head_bob_amp: f64,
    pub jitter_sigma: f64,
    /// Relative controller excursion along x, y, z of the heading frame.
    pub axis_mix: [f64; 3],
    /// Second-harmonic weight on the vertical axis.
    pub harmonic: f64,
    pub harmonic_phase: f64,
    /// Phase lag of the left hand relative to the right, rad.
    pub lr_lag: f64,
    /// Head nod amplitude, degrees.
    pub nod_amp: f64,
    /// Wrist roll amplitude, rad.
    pub wrist_roll: f64,
    /// Neutral head pitch, degrees.
    pub pitch_rest: f64,
    /// Depth of the slow amplitude envelope (0 = constant amplitude).
    pub envelope_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppModulation {
    pub amplitude_scale: f64,
    pub head_travel_scale: f64,
    pub pitch_bias_deg: f64,
    pub freq_scale: f64,
    pub lag_shift: f64,
    pub axis_scale: [f64; 3],
}

impl AppModulation {
    pub fn neutral() -> Self {
        Self {
            amplitude_scale: 1.0,
            head_travel_scale: 1.0,
            pitch_bias_deg: 0.0,
            freq_scale: 1.0,
            lag_shift: 0.0,
            axis_scale: [1.0; 3],
        }
    }

    /// Shared per-application part: (controller amplitude, head travel,
    /// pitch bias in degrees).
    fn archetype(app: &AppLabel) -> (f64, f64, f64) {
        match app {
            AppLabel::SynthRiders => (2.2, 1.1, 1.0),
            AppLabel::SuperhotVr => (1.0, 2.4, 9.0),
            AppLabel::BeatSaber => (2.5, 1.0, 6.5),
            AppLabel::HalfLifeAlyx => (0.8, 1.0, 17.0),
            AppLabel::SocialVr => (0.3, 0.6, 2.5),
            AppLabel::Custom(_) => (1.0, 1.0, 0.0),
        }
    }

    fn draw(app: &AppLabel, strength: f64, rng: &mut ChaCha8Rng) -> Self {
        let (amp, head, pitch) = Self::archetype(app);
        let shared = strength.min(1.0);
        let mut u = || rng.random_range(-1.0..1.0);
        let (e_amp, e_freq, e_lag) = (u(), u(), u());
        let e_axis = [u(), u(), u()];
        let e_pitch = u();
        Self {
            amplitude_scale: amp.powf(shared) * (0.10 * strength * e_amp).exp(),
            head_travel_scale: head.powf(shared),
            pitch_bias_deg: pitch * shared + 3.0 * strength * e_pitch,
            freq_scale: (0.15 * strength * e_freq).exp(),
            lag_shift: 0.35 * strength * e_lag,
            axis_scale: e_axis.map(|e| (0.15 * strength * e).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthProfile {
    pub user: UserId,
    pub signature: UserSignature,
    pub apps: BTreeMap<AppLabel, AppModulation>,
}

impl SynthProfile {
    /// Controller pose in the head's heading frame at time `t`.
    /// `envelope_phase` is the per-recording phase of the slow envelope.
    pub fn controller_local(
        sig: &UserSignature,
        m: &AppModulation,
        right: bool,
        t: f64,
        envelope_phase: f64,
    ) -> DevicePose {
        let w = TAU * sig.osc_freq * m.freq_scale;
        let env = 1.0 + sig.envelope_depth * (TAU * 0.03 * t + envelope_phase).sin();
        let amp = OSC_FRACTION * sig.arm_length * m.amplitude_scale * env;
        let side = if right { 1.0 } else { -1.0 };
        let ph = sig.phase + if right { 0.0 } else { sig.lr_lag + m.lag_shift };
        let a = [
            sig.axis_mix[0] * m.axis_scale[0],
            sig.axis_mix[1] * m.axis_scale[1],
            sig.axis_mix[2] * m.axis_scale[2],
        ];
        let base = [side * 0.22, -0.32, -0.55 * sig.arm_length];
        let osc = [
            side * a[0] * (w * t + ph).sin(),
            a[1] * ((w * t + ph).sin() + sig.harmonic * (2.0 * w * t + ph + sig.harmonic_phase).sin()),
            a[2] * (w * t + ph).cos(),
        ];
        let pos = [
            base[0] + amp * osc[0],
            base[1] + amp * osc[1],
            base[2] + amp * osc[2],
        ];
        let swing = m.amplitude_scale.min(3.0);
        let rot = Quat::from_yaw_pitch_roll(
            side * (-0.25 + 0.2 * swing * (w * t + ph + 0.7).sin()),
            -0.5 + 0.25 * swing * (w * t + ph).cos(),
            side * sig.wrist_roll * swing * (w * t + ph + 1.3).sin(),
        );
        DevicePose::new(pos, rot)
    }

    /// Synthesizes one recording. `rng` drives jitter and the
    /// per-recording phases.
    pub fn synthesize(
        &self,
        app: &AppLabel,
        duration_s: f64,
        rate_hz: f64,
        rng: &mut ChaCha8Rng,
    ) -> Recording {
        let sig = &self.signature;
        let m = self
            .apps
            .get(app)
            .cloned()
            .unwrap_or_else(AppModulation::neutral);
        let env_phase = rng.random_range(0.0..TAU);
        let drift_ph = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];
        let heading0 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let sway_ph = rng.random_range(0.0..TAU);
        let origin = [rng.random_range(-2.0..2.0), 0.0, rng.random_range(-2.0..2.0)];
        let jitter = (sig.jitter_sigma > 0.0).then(|| Normal::new(0.0, sig.jitter_sigma).unwrap());
        let noise = |rng: &mut ChaCha8Rng| -> [f64; 3] {
            match &jitter {
                Some(n) => [n.sample(rng), n.sample(rng), n.sample(rng)],
                None => [0.0; 3],
            }
        };

        let n = (duration_s * rate_hz).round() as usize + 1;
        let w = TAU * sig.osc_freq * m.freq_scale;
        let hs = m.head_travel_scale;
        let mut frames = Vec::with_capacity(n);
        for i in 0..n {
            let t = i as f64 / rate_hz;
            let head = [
                origin[0] + HEAD_DRIFT * hs * (TAU * 0.05 * t + drift_ph[0]).sin(),
                sig.rest_height + sig.head_bob_amp * (2.0 * w * t).sin(),
                origin[2] + HEAD_DRIFT * hs * (TAU * 0.07 * t + drift_ph[1]).sin(),
            ];
            let yaw = heading0 + HEADING_SWAY * hs * (TAU * 0.04 * t + sway_ph).sin();
            let pitch = (sig.pitch_rest
                + m.pitch_bias_deg
                + sig.nod_amp * (0.5 * w * t + sig.phase).sin())
            .to_radians();
            let heading = Quat::from_yaw(yaw);
            let hmd_rot = Quat::from_yaw_pitch_roll(yaw, pitch, 0.0);
            let place = |local: DevicePose| {
                DevicePose::new(
                    add3(head, heading.rotate_vec(local.pos)),
                    heading * local.rot,
                )
            };
            let mut right = place(Self::controller_local(sig, &m, true, t, env_phase));
            let mut left = place(Self::controller_local(sig, &m, false, t, env_phase));
            let mut hmd = DevicePose::new(head, hmd_rot);
            hmd.pos = add3(hmd.pos, noise(rng));
            left.pos = add3(left.pos, noise(rng));
            right.pos = add3(right.pos, noise(rng));
            frames.push(Frame {
                t,
                hmd,
                left,
                right,
            });
        }
        Recording {
            user: self.user.clone(),
            app: app.clone(),
            session: "s1".into(),
            frames,
            nominal_rate: rate_hz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_users: usize,
    pub apps: Vec<AppLabel>,
    pub minutes_per_app: f64,
    pub seed: u64,
    /// Native capture rate, Hz.
    pub rate_hz: f64,
    /// Strength of per-application modulation; 0 makes motion
    /// application-independent.
    pub app_modulation: f64,
}

impl SynthConfig {
    pub fn new(n_users: usize, minutes_per_app: f64, seed: u64) -> Self {
        Self {
            n_users,
            apps: AppLabel::PLAY_ORDER.to_vec(),
            minutes_per_app,
            seed,
            rate_hz: 60.0,
            app_modulation: 1.0,
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_users < 2 {
            return Err(Error::InvalidConfig("synthetic dataset needs at least 2 users".into()));
        }
        if self.minutes_per_app.is_nan() || self.minutes_per_app <= 0.0 {
            return Err(Error::InvalidConfig("minutes_per_app must be positive".into()));
        }
        if self.apps.is_empty() {
            return Err(Error::InvalidConfig("no applications requested".into()));
        }
        if self.rate_hz.is_nan() || self.rate_hz < 30.0 {
            return Err(Error::InvalidConfig("rate_hz must be at least 30".into()));
        }
        if self.app_modulation.is_nan() || self.app_modulation < 0.0 {
            return Err(Error::InvalidConfig("app_modulation must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub profiles: Vec<SynthProfile>,
    pub recordings: Vec<Recording>,
}

impl SyntheticDataset {
    pub fn generate(config: &SynthConfig) -> Result<Self> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0x9E0F]));
        let profiles: Vec<SynthProfile> = (0..config.n_users)
            .map(|i| draw_profile(UserId::numbered(i), &config.apps, config.app_modulation, &mut rng))
            .collect();
        let mut recordings = Vec::with_capacity(profiles.len() * config.apps.len());
        for (ui, p) in profiles.iter().enumerate() {
            for app in &config.apps {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                    config.seed,
                    ui as u64,
                    fnv1a(app.as_str()),
                ]));
                recordings.push(p.synthesize(app, config.minutes_per_app * 60.0, config.rate_hz, &mut rng));
            }
        }
        Ok(Self {
            config: config.clone(),
            profiles,
            recordings,
        })
    }

    /// Writes one CSV per recording plus `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.recordings.len());
        for r in &self.recordings {
            let name = format!("{}_{}_{}.csv", r.user, r.app, r.session);
            write_recording(r, &dir.join(&name))?;
            entries.push(ManifestEntry {
                user: r.user.clone(),
                app: r.app.clone(),
                session: r.session.clone(),
                path: name.into(),
                duration_s: r.duration(),
                frame_range: None,
            });
        }
        let manifest = DatasetManifest::new(entries, dir);
        manifest.save(&dir.join("manifest.json"))?;
        Ok(manifest)
    }
}

fn draw_profile(
    user: UserId,
    apps: &[AppLabel],
    strength: f64,
    rng: &mut ChaCha8Rng,
) -> SynthProfile {
    let signature = UserSignature {
        arm_length: rng.random_range(0.55..0.80),
        rest_height: rng.random_range(1.50..1.90),
        osc_freq: rng.random_range(0.5..1.5),
        phase: rng.random_range(0.0..TAU),
        head_bob_amp: rng.random_range(0.01..0.04),
        jitter_sigma: rng.random_range(0.0005..0.0015),
        axis_mix: [
            rng.random_range(0.4..1.0),
            rng.random_range(0.4..1.0),
            rng.random_range(0.4..1.0),
        ],
        harmonic: rng.random_range(0.0..0.5),
        harmonic_phase: rng.random_range(0.0..TAU),
        lr_lag: rng.random_range(-1.2..1.2),
        nod_amp: rng.random_range(1.0..6.0),
        wrist_roll: rng.random_range(0.1..0.6),
        pitch_rest: rng.random_range(-6.0..6.0),
        envelope_depth: rng.random_range(0.05..0.15),
    };
    let apps = apps
        .iter()
        .map(|a| (a.clone(), AppModulation::draw(a, strength, rng)))
        .collect();
    SynthProfile {
        user,
        signature,
        apps,
    }
}

/// Generates a dataset and writes it to `out_dir` (CSV files plus
/// `manifest.json`).
pub fn generate_synthetic_dataset(
    n_users: usize,
    apps: &[AppLabel],
    minutes_per_app: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let config = SynthConfig {
        apps: apps.to_vec(),
        ..SynthConfig::new(n_users, minutes_per_app, seed)
    };
    SyntheticDataset::generate(&config)?.write(out_dir)
}
