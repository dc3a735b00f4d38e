//! Synthetic "videos" in embedding space whose labels depend on time.
//!
//! Every sample is a `[T, g·g, D_V]` grid: a fixed per-cell background
//! (the static "scene", shared by all samples and frames), event vectors
//! placed in cells, and i.i.d. Gaussian noise. `order` and `direction` labels are recoverable
//! only from frame order (their frame-averaged content is label-independent);
//! `static` labels are readable from any single frame.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Label 1 iff event A happens before event B.
    Order,
    /// Label 1 iff the event moves left-to-right.
    Direction,
    /// Label 1 iff the event sits in the right half; identical frames.
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub task: Task,
    pub n_train: usize,
    pub n_test: usize,
    /// `T`.
    pub frames: usize,
    /// Grid side `g`; `L_V = g * g`.
    pub grid: usize,
    pub d_model: usize,
    pub noise_std: f64,
    /// Expected norm of each cell's background vector; 0 disables it.
    pub background_scale: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            task: Task::Direction,
            n_train: 2000,
            n_test: 500,
            frames: 8,
            grid: 4,
            d_model: 64,
            noise_std: 0.1,
            background_scale: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.grid == 0 || self.d_model == 0 {
            return Err(Error::Config("frames, grid and d_model must be positive".into()));
        }
        for (name, v) in [("noise_std", self.noise_std), ("background_scale", self.background_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        match self.task {
            Task::Order if self.frames < 4 => Err(Error::Config(format!(
                "order task needs at least 4 frames, got {}",
                self.frames
            ))),
            Task::Direction if self.frames < 2 || self.grid < 3 => Err(Error::Config(format!(
                "direction task needs frames >= 2 and grid >= 3, got {} and {}",
                self.frames, self.grid
            ))),
            Task::Static if self.grid < 2 => Err(Error::Config("static task needs grid >= 2".into())),
            _ => Ok(()),
        }
    }
}

/// One labeled video. Stored as plain data so datasets can cross threads.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// Row-major `[T, L_V, D_V]`.
    pub video: Vec<f64>,
    pub shape: [usize; 3],
    pub label: usize,
    pub task: Task,
    pub seed: u64,
}

impl SyntheticSample {
    pub fn video(&self) -> Result<Tensor> {
        Tensor::new(&self.shape, self.video.clone())
    }

    pub fn frames(&self) -> usize {
        self.shape[0]
    }

    pub fn patches(&self) -> usize {
        self.shape[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

/// Random unit vectors shared by every sample of a dataset.
pub fn event_vectors(spec: &DatasetSpec, count: usize) -> Vec<Vec<f64>> {
    let root = RngState::new(spec.seed).derive("events");
    (0..count)
        .map(|i| {
            let v = root.derive_index(i as u64).normal_vec(spec.d_model, 1.0);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Per-cell background, `[L_V, D_V]`, a pure function of the seed.
pub fn background(spec: &DatasetSpec) -> Vec<f64> {
    let std = spec.background_scale / (spec.d_model as f64).sqrt();
    RngState::new(spec.seed)
        .derive("background")
        .normal_vec(spec.patches() * spec.d_model, std)
}

/// Event-free canvas: places `(frame, cell, event)` triples into a zero video.
fn place(spec: &DatasetSpec, events: &[(usize, usize, &[f64])]) -> Vec<f64> {
    let (l, d) = (spec.patches(), spec.d_model);
    let mut video = vec![0.0; spec.frames * l * d];
    for &(f, cell, e) in events {
        let off = (f * l + cell) * d;
        for (x, v) in video[off..off + d].iter_mut().zip(e) {
            *x += v;
        }
    }
    video
}

fn add_noise(video: &mut [f64], noise: &[f64]) {
    video.iter_mut().zip(noise).for_each(|(x, n)| *x += n);
}

/// Adds the per-cell background to every frame, then noise.
fn finish(mut video: Vec<f64>, bg: &[f64], noise: &[f64]) -> Vec<f64> {
    for frame in video.chunks_mut(bg.len()) {
        add_noise(frame, bg);
    }
    add_noise(&mut video, noise);
    video
}

/// Noise-free order video: `first` in `cell_first` for `frames / 2` frames,
/// then `second` in `cell_second` for the rest.
pub fn render_order(spec: &DatasetSpec, first: (&[f64], usize), second: (&[f64], usize)) -> Vec<f64> {
    let half = spec.frames / 2;
    let placed: Vec<(usize, usize, &[f64])> = (0..spec.frames)
        .map(|f| if f < half { (f, first.1, first.0) } else { (f, second.1, second.0) })
        .collect();
    place(spec, &placed)
}

/// Noise-free direction video. The event sits in `row`; for label 1 it starts
/// at the left edge and steps one column right per frame, wrapping modulo
/// `g`. Label 0 is the same clip played backwards.
pub fn render_direction(spec: &DatasetSpec, event: &[f64], row: usize, label: usize) -> Vec<f64> {
    let (t, g) = (spec.frames, spec.grid);
    let placed: Vec<(usize, usize, &[f64])> = (0..t)
        .map(|f| {
            let step = if label == 1 { f } else { t - 1 - f };
            (f, row * g + step % g, event)
        })
        .collect();
    place(spec, &placed)
}

fn sample_rng(spec: &DatasetSpec, split: &str, index: usize) -> RngState {
    RngState::new(spec.seed).derive(split).derive_index(index as u64)
}

fn build<F>(spec: &DatasetSpec, task: Task, mut one: F) -> Result<Dataset>
where
    F: FnMut(&mut RngState, usize) -> Vec<f64>,
{
    let mut spec = spec.clone();
    spec.task = task;
    spec.validate()?;
    let shape = [spec.frames, spec.patches(), spec.d_model];
    let mut split = |name: &str, n: usize| -> Vec<SyntheticSample> {
        (0..n)
            .map(|i| {
                let mut rng = sample_rng(&spec, name, i);
                let seed = rng.seed();
                let label = i % 2;
                SyntheticSample {
                    video: one(&mut rng, label),
                    shape,
                    label,
                    task,
                    seed,
                }
            })
            .collect()
    };
    let train = split("train", spec.n_train);
    let test = split("test", spec.n_test);
    Ok(Dataset { spec, train, test })
}

/// Two events in sequence; label 1 iff A comes first.
pub fn gen_order_task(spec: &DatasetSpec) -> Result<Dataset> {
    let ev = event_vectors(spec, 2);
    let bg = background(spec);
    let (l, n) = (spec.patches(), spec.frames * spec.patches() * spec.d_model);
    build(spec, Task::Order, |rng, label| {
        let (c1, c2) = (rng.below(l), rng.below(l));
        let (first, second) = if label == 1 { (&ev[0], &ev[1]) } else { (&ev[1], &ev[0]) };
        let video = render_order(spec, (first, c1), (second, c2));
        finish(video, &bg, &rng.normal_vec(n, spec.noise_std))
    })
}

/// One event sliding a column per frame; label 1 iff left-to-right.
pub fn gen_direction_task(spec: &DatasetSpec) -> Result<Dataset> {
    let ev = event_vectors(spec, 1);
    let bg = background(spec);
    let n = spec.frames * spec.patches() * spec.d_model;
    build(spec, Task::Direction, |rng, label| {
        let row = rng.below(spec.grid);
        let video = render_direction(spec, &ev[0], row, label);
        finish(video, &bg, &rng.normal_vec(n, spec.noise_std))
    })
}

/// Event in the left (label 0) or right (label 1) half, same in every frame.
pub fn gen_static_control(spec: &DatasetSpec) -> Result<Dataset> {
    let ev = event_vectors(spec, 1);
    let bg = background(spec);
    let (g, l, d) = (spec.grid, spec.patches(), spec.d_model);
    build(spec, Task::Static, |rng, label| {
        let half = g / 2;
        let row = rng.below(g);
        let col = if label == 1 { g - half + rng.below(half) } else { rng.below(half) };
        let mut frame = vec![0.0; l * d];
        let off = (row * g + col) * d;
        frame[off..off + d].copy_from_slice(&ev[0]);
        finish(frame, &bg, &rng.normal_vec(l * d, spec.noise_std)).repeat(spec.frames)
    })
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    match spec.task {
        Task::Order => gen_order_task(spec),
        Task::Direction => gen_direction_task(spec),
        Task::Static => gen_static_control(spec),
    }
}

/// Per-patch mean over frames, `[L_V, D_V]`.
pub fn time_average(sample: &SyntheticSample) -> Vec<f64> {
    let [t, l, d] = sample.shape;
    let mut out = vec![0.0; l * d];
    for f in 0..t {
        for (o, v) in out.iter_mut().zip(&sample.video[f * l * d..(f + 1) * l * d]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= t as f64);
    out
}

/// Writes `train.tgv`, `test.tgv` (tensors `video.NNNNN` and `labels`) and
/// `dataset.json` into `dir`.
pub fn dump_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, split) in [("train", &data.train), ("test", &data.test)] {
        let mut params = ParamSet::new();
        for (i, s) in split.iter().enumerate() {
            params.push(format!("video.{i:05}"), &s.shape, s.video.clone());
        }
        params.push("labels", &[split.len()], split.iter().map(|s| s.label as f64).collect());
        let manifest = vec![
            ("format".to_string(), "timegate-dataset".to_string()),
            ("split".to_string(), name.to_string()),
            ("samples".to_string(), split.len().to_string()),
        ];
        checkpoint::save(&dir.join(format!("{name}.tgv")), &manifest, &params)?;
    }
    let json = serde_json::to_string_pretty(&data.spec)?;
    let path = dir.join("dataset.json");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: Task) -> DatasetSpec {
        DatasetSpec {
            task,
            n_train: 40,
            n_test: 10,
            frames: 8,
            grid: 4,
            d_model: 8,
            noise_std: 0.1,
            background_scale: 1.0,
            seed: 3,
        }
    }

    fn reversed(video: &[f64], t: usize) -> Vec<f64> {
        let per = video.len() / t;
        (0..t).rev().flat_map(|f| video[f * per..(f + 1) * per].to_vec()).collect()
    }

    #[test]
    fn generation_is_deterministic() {
        for task in [Task::Order, Task::Direction, Task::Static] {
            assert_eq!(generate(&spec(task)).unwrap(), generate(&spec(task)).unwrap());
        }
    }

    #[test]
    fn train_and_test_use_distinct_streams() {
        let d = generate(&spec(Task::Direction)).unwrap();
        for a in &d.train {
            assert!(d.test.iter().all(|b| b.seed != a.seed));
        }
    }

    #[test]
    fn preconditions() {
        let mut s = spec(Task::Order);
        s.frames = 3;
        assert!(gen_order_task(&s).is_err());
        let mut s = spec(Task::Direction);
        s.grid = 2;
        assert!(gen_direction_task(&s).is_err());
    }

    #[test]
    fn swapping_order_intervals_flips_label() {
        let s = spec(Task::Order);
        let ev = event_vectors(&s, 2);
        let a_first = render_order(&s, (&ev[0], 3), (&ev[1], 9));
        let b_first = render_order(&s, (&ev[1], 9), (&ev[0], 3));
        // Swapping the halves of a label-1 video gives the label-0 video.
        let half = a_first.len() / 2;
        let swapped: Vec<f64> = [&a_first[half..], &a_first[..half]].concat();
        assert_eq!(swapped, b_first);
    }

    #[test]
    fn order_has_no_single_frame_shortcut() {
        let s = spec(Task::Order);
        let ev = event_vectors(&s, 2);
        let noise = RngState::new(11).normal_vec(s.frames * s.patches() * s.d_model, s.noise_std);
        let bg = background(&s);
        let one = finish(render_order(&s, (&ev[0], 2), (&ev[1], 13)), &bg, &noise);
        let zero = finish(render_order(&s, (&ev[1], 13), (&ev[0], 2)), &bg, &noise);
        let mk = |video, label| SyntheticSample {
            video,
            shape: [s.frames, s.patches(), s.d_model],
            label,
            task: Task::Order,
            seed: 0,
        };
        let (a, b) = (time_average(&mk(one, 1)), time_average(&mk(zero, 0)));
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12));
    }

    #[test]
    fn reversing_direction_flips_label() {
        let s = spec(Task::Direction);
        let ev = event_vectors(&s, 1);
        for row in 0..4 {
            let right = render_direction(&s, &ev[0], row, 1);
            let left = render_direction(&s, &ev[0], row, 0);
            assert_eq!(reversed(&right, s.frames), left);
        }
    }

    #[test]
    fn short_direction_clip_moves_right() {
        let s = DatasetSpec {
            frames: 2,
            grid: 3,
            noise_std: 0.0,
            n_train: 20,
            ..spec(Task::Direction)
        };
        let d = gen_direction_task(&s).unwrap();
        let bg = background(&s);
        for sample in &d.train {
            let (l, dm) = (9, s.d_model);
            let mut cols = Vec::new();
            let mut occupied = 0;
            for f in 0..2 {
                for p in 0..l {
                    let cell = (f * l + p) * dm..(f * l + p + 1) * dm;
                    if sample.video[cell].iter().zip(&bg[p * dm..(p + 1) * dm]).any(|(v, b)| v != b) {
                        occupied += 1;
                        cols.push(p % 3);
                    }
                }
            }
            assert_eq!(occupied, 2);
            if sample.label == 1 {
                assert!(cols[1] > cols[0]);
            } else {
                assert!(cols[1] < cols[0]);
            }
        }
    }

    #[test]
    fn labels_are_balanced() {
        for n in [9, 10, 501] {
            let s = DatasetSpec {
                n_train: n,
                n_test: 0,
                ..spec(Task::Direction)
            };
            let d = generate(&s).unwrap();
            let ones = d.train.iter().filter(|x| x.label == 1).count();
            assert!((ones as i64 - (n / 2) as i64).abs() <= 1);
        }
    }

    #[test]
    fn static_frames_are_identical() {
        let d = generate(&spec(Task::Static)).unwrap();
        for s in &d.train {
            let per = s.video.len() / s.frames();
            for f in 1..s.frames() {
                assert_eq!(s.video[f * per..(f + 1) * per], s.video[..per]);
            }
            assert_eq!(reversed(&s.video, s.frames()), s.video);
        }
    }

    #[test]
    fn dump_writes_container_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate(&spec(Task::Static)).unwrap();
        dump_dataset(&d, dir.path()).unwrap();
        let (_, params) = checkpoint::load(&dir.path().join("test.tgv")).unwrap();
        assert_eq!(params.len(), d.test.len() + 1);
        assert_eq!(params.get("video.00003").unwrap().data, d.test[3].video);
        let spec_back: DatasetSpec =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("dataset.json")).unwrap()).unwrap();
        assert_eq!(spec_back, d.spec);
    }
}
