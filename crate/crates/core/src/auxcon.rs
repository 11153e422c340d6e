//! Auxiliary consensus: a student network trained to reproduce the frozen
//! teacher's tapped features on in-distribution images. Pixels where the
//! two disagree are scored as anomalous.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::micronet::{epoch_batches, sum_in_order, MicroNet, TapMap, TrainConfig};
use crate::tensorgrid::{bilinear_resize, FeatureMap, Grid, LayerId, ScoreMap};

pub const DEFAULT_SUPERVISION: [LayerId; 6] = [
    LayerId::C2,
    LayerId::C3,
    LayerId::C4,
    LayerId::C5,
    LayerId::LH,
    LayerId::O,
];
pub const DEFAULT_EVALUATION: [LayerId; 1] = [LayerId::C5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimicConfig {
    pub supervision: Vec<LayerId>,
    pub evaluation: Vec<LayerId>,
    pub train: TrainConfig,
}

impl MimicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.supervision.is_empty() || self.evaluation.is_empty() {
            return Err(Error::config("supervision and evaluation layer sets must be non-empty"));
        }
        if let Some(l) = self.evaluation.iter().find(|l| !self.supervision.contains(l)) {
            return Err(Error::config(format!(
                "evaluation layer {l} is not in the supervision set"
            )));
        }
        self.train.validate()
    }
}

/// Frozen teacher, trainable student and the tap correspondence between them.
#[derive(Debug, Clone)]
pub struct AuxPair {
    teacher: MicroNet,
    pub student: MicroNet,
    layer_map: BTreeMap<LayerId, LayerId>,
}

impl AuxPair {
    /// Pairs each supervised teacher tap with the student tap of the same name.
    pub fn new(teacher: MicroNet, student: MicroNet, supervision: &[LayerId]) -> Result<Self> {
        let layer_map = supervision.iter().map(|&t| (t, t)).collect();
        AuxPair::with_layer_map(teacher, student, layer_map)
    }

    pub fn with_layer_map(
        teacher: MicroNet,
        student: MicroNet,
        layer_map: BTreeMap<LayerId, LayerId>,
    ) -> Result<Self> {
        if !teacher.is_frozen() {
            return Err(Error::contract("the teacher of an auxiliary pair must be frozen"));
        }
        if teacher.input_channels() != student.input_channels() {
            return Err(Error::contract("teacher and student take different input channels"));
        }
        for (&t, &s) in &layer_map {
            let (Some(tc), Some(sc)) = (teacher.tap_channels(t), student.tap_channels(s)) else {
                return Err(Error::contract(format!("tap pair {t} -> {s} is not declared on both networks")));
            };
            if tc != sc {
                return Err(Error::contract(format!(
                    "teacher tap {t} has {tc} channels, student tap {s} has {sc}"
                )));
            }
        }
        Ok(AuxPair {
            teacher,
            student,
            layer_map,
        })
    }

    pub fn teacher(&self) -> &MicroNet {
        &self.teacher
    }

    pub fn student_tap(&self, teacher_tap: LayerId) -> Result<LayerId> {
        self.layer_map
            .get(&teacher_tap)
            .copied()
            .ok_or_else(|| Error::config(format!("no student layer corresponds to teacher tap {teacher_tap}")))
    }

    pub fn into_parts(self) -> (MicroNet, MicroNet) {
        (self.teacher, self.student)
    }

    /// Mimic loss of one image given both networks' tap outputs.
    pub fn loss_from_taps(
        &self,
        teacher_taps: &TapMap,
        student_taps: &TapMap,
        supervision: &[LayerId],
    ) -> Result<(f64, TapMap)> {
        mimic_terms(&self.layer_map, teacher_taps, student_taps, supervision)
    }

    /// `sum_l ||f_l - g_l||_F^2 / s_l` with `s_l = H W C`, plus the gradient
    /// `2 (g_l - f_l) / s_l` at each student tap.
    pub fn mimic_loss(&self, image: &Grid, supervision: &[LayerId]) -> Result<(f64, TapMap)> {
        let t = self.teacher.forward_with_taps(image)?;
        let s = self.student.forward_with_taps(image)?;
        self.loss_from_taps(&t, &s, supervision)
    }

    /// Per-pixel mimic error at teacher tap `l`, in the tap's resolution.
    pub fn layer_inconsistency(&self, teacher_taps: &TapMap, student_taps: &TapMap, l: LayerId) -> Result<ScoreMap> {
        let f = teacher_taps
            .get(&l)
            .ok_or_else(|| Error::contract(format!("teacher output lacks tap {l}")))?;
        let g = student_taps
            .get(&self.student_tap(l)?)
            .ok_or_else(|| Error::contract(format!("student output lacks the tap paired with {l}")))?;
        layer_inconsistency(f, g)
    }

    /// Product over `evaluation` of per-layer inconsistency maps resized to
    /// `out_h x out_w`.
    pub fn score_from_taps(
        &self,
        teacher_taps: &TapMap,
        student_taps: &TapMap,
        evaluation: &[LayerId],
        out_h: usize,
        out_w: usize,
    ) -> Result<ScoreMap> {
        if evaluation.is_empty() {
            return Err(Error::config("evaluation layer set is empty"));
        }
        let mut combined = ScoreMap::filled(out_h, out_w, 1.0);
        for &l in evaluation {
            let psi = self.layer_inconsistency(teacher_taps, student_taps, l)?;
            combined = combined.product(&bilinear_resize(&psi, out_h, out_w)?)?;
        }
        Ok(combined)
    }

    pub fn score(&self, image: &Grid, evaluation: &[LayerId], out_h: usize, out_w: usize) -> Result<ScoreMap> {
        let t = self.teacher.forward_with_taps(image)?;
        let s = self.student.forward_with_taps(image)?;
        self.score_from_taps(&t, &s, evaluation, out_h, out_w)
    }
}

fn mimic_terms(
    layer_map: &BTreeMap<LayerId, LayerId>,
    teacher_taps: &TapMap,
    student_taps: &TapMap,
    supervision: &[LayerId],
) -> Result<(f64, TapMap)> {
    let mut loss = 0.0;
    let mut grads = TapMap::new();
    for &l in supervision {
        let s_tap = *layer_map
            .get(&l)
            .ok_or_else(|| Error::config(format!("no student layer corresponds to teacher tap {l}")))?;
        let f = teacher_taps
            .get(&l)
            .ok_or_else(|| Error::contract(format!("teacher output lacks tap {l}")))?;
        let g = student_taps
            .get(&s_tap)
            .ok_or_else(|| Error::contract(format!("student output lacks tap {s_tap}")))?;
        let (term, grad) = tap_mimic_term(f, g)?;
        loss += term;
        grads.insert(s_tap, grad);
    }
    Ok((loss, grads))
}

fn tap_mimic_term(f: &FeatureMap, g: &FeatureMap) -> Result<(f64, FeatureMap)> {
    if !f.same_shape(g) {
        return Err(Error::contract(format!(
            "tap {} shapes differ: teacher {:?}, student {:?}",
            f.layer,
            f.shape(),
            g.shape()
        )));
    }
    let s = f.size() as f64;
    let mut sq = 0.0;
    let mut grad = Vec::with_capacity(f.size());
    for (a, b) in f.data.iter().zip(&g.data) {
        let d = b - a;
        sq += d * d;
        grad.push(2.0 * d / s);
    }
    Ok((
        sq / s,
        FeatureMap {
            layer: g.layer,
            height: g.height,
            width: g.width,
            channels: g.channels,
            data: grad,
        },
    ))
}

/// `||f_ij - g_ij||^2 / C` per pixel.
pub fn layer_inconsistency(f: &FeatureMap, g: &FeatureMap) -> Result<ScoreMap> {
    if !f.same_shape(g) {
        return Err(Error::contract(format!(
            "inconsistency between maps of shape {:?} and {:?}",
            f.shape(),
            g.shape()
        )));
    }
    let c = f.channels as f64;
    let data = f
        .pixels()
        .zip(g.pixels())
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / c)
        .collect();
    ScoreMap::new(f.height, f.width, data)
}

/// Mean per-image mimic loss of each epoch.
pub type TrainLog = Vec<f64>;

/// Trains the student with plain SGD on the batch-summed mimic loss. The
/// teacher's taps are computed once up front; its parameters are checked to
/// be bit-identical afterwards.
pub fn train_aux(pair: AuxPair, images: &[Grid], cfg: &MimicConfig) -> Result<(AuxPair, TrainLog)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::contract("auxiliary training set is empty"));
    }
    if !pair.teacher.is_frozen() {
        return Err(Error::MutationRefused);
    }
    let checksum = pair.teacher.param_checksum();
    let teacher_taps = images
        .par_iter()
        .map(|x| pair.teacher.forward_with_taps(x))
        .collect::<Result<Vec<_>>>()?;
    let AuxPair {
        teacher,
        mut student,
        layer_map,
    } = pair;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut log = Vec::with_capacity(cfg.train.epochs);
    for _ in 0..cfg.train.epochs {
        let mut epoch_loss = 0.0;
        for batch in epoch_batches(&mut rng, images.len(), cfg.train.batch_size) {
            let parts = batch
                .par_iter()
                .map(|&i| {
                    let fwd = student.forward(&images[i])?;
                    let s_taps = student.taps_of(&fwd);
                    let (loss, up) = mimic_terms(&layer_map, &teacher_taps[i], &s_taps, &cfg.supervision)?;
                    Ok((loss, student.backward_from(&fwd, &up)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let (losses, grads): (Vec<f64>, Vec<Vec<f64>>) = parts.into_iter().unzip();
            epoch_loss += losses.iter().sum::<f64>();
            let g = sum_in_order(grads, student.param_count());
            student.sgd_step(&g, cfg.train.learning_rate)?;
        }
        let mean = epoch_loss / images.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch: log.len() });
        }
        log.push(mean);
    }
    if teacher.param_checksum() != checksum {
        return Err(Error::MutationRefused);
    }
    Ok((
        AuxPair {
            teacher,
            student,
            layer_map,
        },
        log,
    ))
}

/// Renders a training log as one `epoch mean_loss` line per epoch.
pub fn format_train_log(log: &[f64]) -> String {
    log.iter()
        .enumerate()
        .map(|(e, l)| format!("{e} {l}\n"))
        .collect()
}

pub fn parse_train_log(text: &str) -> Result<TrainLog> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(i, line)| {
            let mut it = line.split_whitespace();
            let (Some(e), Some(v), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::config(format!("malformed training-log line {line:?}")));
            };
            if e.parse::<usize>().ok() != Some(i) {
                return Err(Error::config(format!("training log epoch {e:?} out of sequence")));
            }
            v.parse::<f64>()
                .map_err(|_| Error::config(format!("bad loss value {v:?} in training log")))
        })
        .collect()
}
