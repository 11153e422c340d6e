//! File-backed experiment stages.
//!
//! Each stage reads its inputs from the output directory and writes its
//! artifacts there, so any stage can be rerun on its own once its inputs
//! exist. [`Pipeline::run_all`] runs them in order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::auxcon::{format_train_log, train_aux, AuxPair};
use crate::binio::{read_file, write_file};
use crate::config::{stream_seed, MemoryConfig, PipelineConfig};
use crate::dump::FeatureDump;
use crate::error::{Error, Result};
use crate::eval::{
    cosme_score, evaluate, group_report, split_hard_id, truth_partition, Channel, EvalResult, GroupReport,
    HardIdReport, IdSubtype, Label, LabeledScores,
};
use crate::micronet::{
    argmax_classes, pretrain_teacher, segmentation_layers, student_for, BackboneWidths, MicroNet, TapMap,
};
use crate::mulmem::{MemoryBank, SelectionOrder, StandardizationStats, StandardizeMode, SubBranch};
use crate::report;
use crate::scenario::{gen_synthetic, Dataset, PixelKind};
use crate::tensorgrid::{Grid, LayerId};

pub const CHANNELS: [&str; 3] = ["mulmem", "auxcon", "cosme"];

/// Per-pixel scores of one test set, in image then raster order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreTable {
    pub image: Vec<String>,
    pub pixel: Vec<usize>,
    pub label: Vec<u16>,
    pub kind: Vec<PixelKind>,
    pub mulmem: Vec<f64>,
    pub auxcon: Vec<f64>,
    pub cosme: Vec<f64>,
}

fn kind_name(k: PixelKind) -> &'static str {
    match k {
        PixelKind::Normal => "normal",
        PixelKind::Hard => "hard",
        PixelKind::Ood => "ood",
    }
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.pixel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixel.is_empty()
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        match name {
            "mulmem" => Some(&self.mulmem),
            "auxcon" => Some(&self.auxcon),
            "cosme" => Some(&self.cosme),
            _ => None,
        }
    }

    fn labeled(&self, scores: &[f64]) -> LabeledScores {
        LabeledScores {
            scores: scores.to_vec(),
            labels: self
                .kind
                .iter()
                .map(|&k| if k == PixelKind::Ood { Label::Ood } else { Label::Id })
                .collect(),
            id_subtype: Some(
                self.kind
                    .iter()
                    .map(|&k| if k == PixelKind::Hard { IdSubtype::Hard } else { IdSubtype::Normal })
                    .collect(),
            ),
        }
    }

    pub fn to_csv(&self, digest: &str) -> String {
        let mut s = format!("{}{digest}\n", report::DIGEST_PREFIX);
        s.push_str("image,pixel,label,kind,mulmem,auxcon,cosme\n");
        for i in 0..self.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                self.image[i],
                self.pixel[i],
                self.label[i],
                kind_name(self.kind[i]),
                self.mulmem[i],
                self.auxcon[i],
                self.cosme[i]
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut t = ScoreTable::default();
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#'));
        match lines.next() {
            Some((_, "image,pixel,label,kind,mulmem,auxcon,cosme")) => {}
            _ => return Err(Error::contract("score table header missing")),
        }
        for (n, line) in lines {
            let bad = |what: &str| Error::contract(format!("score table line {}: bad {what}", n + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad("field count"));
            }
            t.image.push(f[0].to_string());
            t.pixel.push(f[1].parse().map_err(|_| bad("pixel"))?);
            t.label.push(f[2].parse().map_err(|_| bad("label"))?);
            t.kind.push(match f[3] {
                "normal" => PixelKind::Normal,
                "hard" => PixelKind::Hard,
                "ood" => PixelKind::Ood,
                _ => return Err(bad("kind")),
            });
            t.mulmem.push(f[4].parse().map_err(|_| bad("mulmem"))?);
            t.auxcon.push(f[5].parse().map_err(|_| bad("auxcon"))?);
            t.cosme.push(f[6].parse().map_err(|_| bad("cosme"))?);
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub channels: Vec<(String, EvalResult)>,
    pub hard_split: HardIdReport,
    pub truth_groups: GroupReport,
}

impl Evaluation {
    pub fn metric(&self, channel: &str) -> Option<EvalResult> {
        self.channels.iter().find(|(n, _)| n == channel).map(|(_, r)| *r)
    }
}

pub fn evaluate_table(table: &ScoreTable) -> Result<Evaluation> {
    let channels = CHANNELS
        .iter()
        .map(|&c| Ok((c.to_string(), evaluate(&table.labeled(table.channel(c).unwrap()))?)))
        .collect::<Result<Vec<_>>>()?;
    let named: Vec<Channel<'_>> = CHANNELS
        .iter()
        .map(|&c| Channel {
            name: c,
            scores: table.channel(c).unwrap(),
        })
        .collect();
    let mulmem = table.labeled(&table.mulmem);
    Ok(Evaluation {
        channels,
        hard_split: split_hard_id(&mulmem, &named)?,
        truth_groups: group_report(&truth_partition(&mulmem), &named)?,
    })
}

/// Teacher taps for every image, in input order.
pub fn tap_all(net: &MicroNet, images: &[Grid]) -> Result<Vec<TapMap>> {
    images.par_iter().map(|g| net.forward_with_taps(g)).collect()
}

/// Threshold-gated initialization followed by `passes` momentum passes, one
/// update batch per image.
pub fn build_bank(mem: &MemoryConfig, layers: &[LayerId], taps: &[TapMap], seed: u64) -> Result<MemoryBank> {
    let branches = layers
        .iter()
        .map(|&l| {
            let maps = taps
                .iter()
                .map(|t| t.get(&l).ok_or_else(|| Error::config(format!("features lack memory layer {l}"))))
                .collect::<Result<Vec<_>>>()?;
            let mut b = SubBranch::init_from_maps(
                l,
                &maps,
                mem.threshold,
                mem.capacity,
                mem.momentum,
                SelectionOrder::Seeded(stream_seed(seed, l.name())),
            )?;
            for _ in 0..mem.passes {
                for m in &maps {
                    b.update_from_maps(&[m])?;
                }
            }
            Ok(b)
        })
        .collect::<Result<Vec<_>>>()?;
    MemoryBank::new(branches)
}

/// Predicted classes at `h x w` from the `O` tap, if present.
fn predicted(taps: &TapMap, h: usize, w: usize) -> Option<Vec<u16>> {
    taps.get(&LayerId::O).map(|o| argmax_classes(o, h, w))
}

pub fn fit_stats(bank: &MemoryBank, taps: &[TapMap], h: usize, w: usize) -> Result<StandardizationStats> {
    let runs = taps
        .par_iter()
        .map(|t| Ok((bank.score(t, h, w)?, predicted(t, h, w))))
        .collect::<Result<Vec<_>>>()?;
    StandardizationStats::fit(runs)
}

/// Everything needed to score test images.
pub struct Scorer<'a> {
    pub bank: &'a MemoryBank,
    pub stats: &'a StandardizationStats,
    pub mode: StandardizeMode,
    pub pair: &'a AuxPair,
    pub evaluation: &'a [LayerId],
}

impl Scorer<'_> {
    fn score_one(&self, t: &TapMap, s: &TapMap, h: usize, w: usize) -> Result<[Vec<f64>; 3]> {
        let raw = self.bank.score(t, h, w)?;
        let classes = predicted(t, h, w);
        let gamma = self.stats.standardize(&raw, classes.as_deref(), self.mode)?;
        let psi = self.pair.score_from_taps(t, s, self.evaluation, h, w)?;
        let cosme = cosme_score(&psi, &gamma)?;
        Ok([gamma.data, psi.data, cosme.data])
    }

    pub fn score(&self, data: &Dataset, teacher_taps: &[TapMap], student_taps: &[TapMap]) -> Result<ScoreTable> {
        let per_image = data
            .images
            .par_iter()
            .zip(teacher_taps.par_iter().zip(student_taps.par_iter()))
            .map(|(img, (t, s))| self.score_one(t, s, img.image.height, img.image.width))
            .collect::<Result<Vec<_>>>()?;
        let mut table = ScoreTable::default();
        for (img, [m, a, c]) in data.images.iter().zip(per_image) {
            let n = img.labels.len();
            table.image.extend(std::iter::repeat_n(img.id.clone(), n));
            table.pixel.extend(0..n);
            table.label.extend_from_slice(&img.labels);
            table.kind.extend_from_slice(&img.kinds);
            table.mulmem.extend(m);
            table.auxcon.extend(a);
            table.cosme.extend(c);
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub sweep: &'static str,
    pub layers: Vec<LayerId>,
    pub channels: Vec<(String, EvalResult)>,
}

pub const MEMORY_SWEEP: [&[LayerId]; 5] = [
    &[LayerId::C4],
    &[LayerId::C5],
    &[LayerId::LH],
    &[LayerId::C4, LayerId::C5],
    &[LayerId::C4, LayerId::C5, LayerId::LH],
];

pub const EVALUATION_SWEEP: [&[LayerId]; 7] = [
    &[LayerId::C4],
    &[LayerId::C5],
    &[LayerId::LH],
    &[LayerId::O],
    &[LayerId::C4, LayerId::C5],
    &[LayerId::C4, LayerId::C5, LayerId::LH],
    &[LayerId::C4, LayerId::C5, LayerId::LH, LayerId::O],
];

pub fn layer_set_name(layers: &[LayerId]) -> String {
    layers.iter().map(|l| l.name()).collect::<Vec<_>>().join("+")
}

pub fn ablation_csv(rows: &[AblationRow], digest: &str) -> String {
    let mut s = format!("{}{digest}\n", report::DIGEST_PREFIX);
    s.push_str("sweep,setting,mulmem_auroc,auxcon_auroc,cosme_auroc,cosme_fpr95,cosme_ap\n");
    for r in rows {
        let get = |c: &str| r.channels.iter().find(|(n, _)| n == c).map(|(_, e)| *e).unwrap();
        let (m, a, c) = (get("mulmem"), get("auxcon"), get("cosme"));
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.sweep,
            layer_set_name(&r.layers),
            m.auroc,
            a.auroc,
            c.auroc,
            c.fpr95,
            c.ap
        );
    }
    s
}

/// Wraps a stage body so its failure names the stage.
fn stage<T>(name: &'static str, body: impl FnOnce() -> Result<T>) -> Result<T> {
    body().map_err(|e| Error::Stage {
        stage: name,
        error: Box::new(e),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub teacher_losses: Vec<f64>,
    pub aux_losses: Vec<f64>,
    pub evaluation: Evaluation,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    out: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline { cfg, out: out.into() })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn under(&self, dir: &str, file: &str) -> PathBuf {
        self.out.join(dir).join(file)
    }

    pub fn train_path(&self) -> PathBuf {
        self.under(&self.cfg.paths.data, "train.csmx")
    }

    pub fn test_path(&self) -> PathBuf {
        self.under(&self.cfg.paths.data, "test.csmx")
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.under(&self.cfg.paths.checkpoints, "teacher.csmn")
    }

    pub fn student_path(&self) -> PathBuf {
        self.under(&self.cfg.paths.checkpoints, "student.csmn")
    }

    pub fn bank_path(&self) -> PathBuf {
        self.under(&self.cfg.paths.banks, "memory.csmb")
    }

    pub fn stats_path(&self) -> PathBuf {
        self.under(&self.cfg.paths.banks, "stats.csms")
    }

    pub fn dump_dir(&self) -> PathBuf {
        self.out.join(&self.cfg.paths.dumps)
    }

    pub fn report_path(&self, file: &str) -> PathBuf {
        self.under(&self.cfg.paths.reports, file)
    }

    fn write_text(&self, path: &Path, text: &str) -> Result<()> {
        write_file(path, text.as_bytes())
    }

    fn read_text(&self, path: &Path) -> Result<String> {
        String::from_utf8(read_file(path)?).map_err(|_| Error::contract(format!("{} is not UTF-8", path.display())))
    }

    fn image_size(&self) -> (usize, usize) {
        (self.cfg.scenario.height, self.cfg.scenario.width)
    }

    /// Writes the canonical config next to the artifacts.
    pub fn echo_config(&self) -> Result<()> {
        self.write_text(&self.out.join("config.toml"), &self.cfg.to_toml())
    }

    pub fn gen(&self) -> Result<()> {
        stage("gen", || {
            let s = gen_synthetic(&self.cfg.scenario_spec())?;
            s.train.save(&self.train_path())?;
            s.test.save(&self.test_path())
        })
    }

    pub fn pretrain(&self) -> Result<Vec<f64>> {
        stage("pretrain", || {
            let train = Dataset::load(&self.train_path())?;
            let ch = self.cfg.scenario.channels;
            let layers = segmentation_layers(ch, BackboneWidths(self.cfg.model.teacher_widths), train.num_classes);
            let net = MicroNet::seeded(ch, layers, vec![], self.cfg.teacher_init_seed())?;
            let (teacher, log) = pretrain_teacher(net, &train.labeled(), &self.cfg.teacher_train())?;
            teacher.save(&self.teacher_path())?;
            self.write_text(&self.report_path("teacher_loss.txt"), &format_train_log(&log))?;
            Ok(log)
        })
    }

    fn teacher(&self) -> Result<MicroNet> {
        let t = MicroNet::load(&self.teacher_path())?;
        if !t.is_frozen() {
            return Err(Error::contract("teacher checkpoint is not frozen"));
        }
        Ok(t)
    }

    /// Builds the memory bank and standardization statistics from teacher
    /// features of the training set, or from CSMD dumps when `dumps` is set.
    pub fn build_memory(&self, dumps: Option<&Path>) -> Result<()> {
        stage("build-memory", || {
            let seed = self.cfg.memory_init_seed();
            let (bank, stats) = match dumps {
                None => {
                    let train = Dataset::load(&self.train_path())?;
                    let taps = tap_all(&self.teacher()?, &train.grids())?;
                    let bank = build_bank(&self.cfg.memory, &self.cfg.memory.layers, &taps, seed)?;
                    let (h, w) = self.image_size();
                    let stats = fit_stats(&bank, &taps, h, w)?;
                    (bank, stats)
                }
                Some(dir) => {
                    let dumps = load_dumps(dir)?;
                    let taps: Vec<TapMap> = dumps.iter().map(FeatureDump::taps).collect();
                    let bank = build_bank(&self.cfg.memory, &self.cfg.memory.layers, &taps, seed)?;
                    let runs = dumps
                        .iter()
                        .zip(&taps)
                        .map(|(d, t)| Ok((bank.score(t, d.height, d.width)?, d.predicted.clone())))
                        .collect::<Result<Vec<_>>>()?;
                    (bank, StandardizationStats::fit(runs)?)
                }
            };
            bank.save(&self.bank_path())?;
            stats.save(&self.stats_path())
        })
    }

    pub fn train_aux(&self) -> Result<Vec<f64>> {
        stage("train-aux", || {
            let train = Dataset::load(&self.train_path())?;
            let teacher = self.teacher()?;
            let mimic = self.cfg.mimic();
            let student = student_for(
                &teacher,
                BackboneWidths(self.cfg.model.student_widths),
                train.num_classes,
                &mimic.supervision,
                self.cfg.student_init_seed(),
            )?;
            let pair = AuxPair::new(teacher, student, &mimic.supervision)?;
            let (pair, log) = train_aux(pair, &train.grids(), &mimic)?;
            let (_, student) = pair.into_parts();
            student.save(&self.student_path())?;
            self.write_text(&self.report_path("aux_loss.txt"), &format_train_log(&log))?;
            Ok(log)
        })
    }

    fn pair(&self) -> Result<AuxPair> {
        AuxPair::new(self.teacher()?, MicroNet::load(&self.student_path())?, &self.cfg.aux.supervision)
    }

    /// Scores the test set, writing one CSMD dump per image and the score table.
    pub fn score(&self) -> Result<ScoreTable> {
        stage("score", || {
            let test = Dataset::load(&self.test_path())?;
            let bank = MemoryBank::load(&self.bank_path())?;
            let stats = StandardizationStats::load(&self.stats_path())?;
            let pair = self.pair()?;
            let grids = test.grids();
            let t_taps = tap_all(pair.teacher(), &grids)?;
            let s_taps = tap_all(&pair.student, &grids)?;
            for (img, t) in test.images.iter().zip(&t_taps) {
                let (h, w) = (img.image.height, img.image.width);
                let mut d = FeatureDump::new(img.id.clone(), h, w, t.values().cloned().collect())?
                    .with_mask(img.labels.clone())?;
                if let Some(p) = predicted(t, h, w) {
                    d = d.with_predicted(p)?;
                }
                d.save(&self.dump_dir().join(format!("{}.csmd", img.id)))?;
            }
            let scorer = Scorer {
                bank: &bank,
                stats: &stats,
                mode: self.cfg.memory.standardize,
                pair: &pair,
                evaluation: &self.cfg.aux.evaluation,
            };
            let table = scorer.score(&test, &t_taps, &s_taps)?;
            self.write_text(&self.report_path("scores.csv"), &table.to_csv(&self.cfg.digest()))?;
            Ok(table)
        })
    }

    /// Memory-only scoring of external CSMD dumps.
    pub fn score_dumps(&self, dir: &Path) -> Result<String> {
        stage("score", || {
            let bank = MemoryBank::load(&self.bank_path())?;
            let stats = StandardizationStats::load(&self.stats_path())?;
            let mut s = format!("{}{}\n", report::DIGEST_PREFIX, self.cfg.digest());
            s.push_str("image,pixel,label,mulmem\n");
            for d in load_dumps(dir)? {
                let raw = bank.score(&d.taps(), d.height, d.width)?;
                let gamma = stats.standardize(&raw, d.predicted.as_deref(), self.cfg.memory.standardize)?;
                for (i, g) in gamma.data.iter().enumerate() {
                    let label = d.mask.as_ref().map(|m| m[i].to_string()).unwrap_or_default();
                    let _ = writeln!(s, "{},{i},{label},{g}", d.image_id);
                }
            }
            self.write_text(&self.report_path("dump_scores.csv"), &s)?;
            Ok(s)
        })
    }

    fn load_scores(&self) -> Result<ScoreTable> {
        ScoreTable::from_csv(&self.read_text(&self.report_path("scores.csv"))?)
    }

    /// Metrics per channel, the threshold-based hard-ID split and the ground
    /// truth group means, written as CSV.
    pub fn eval(&self) -> Result<Evaluation> {
        stage("eval", || {
            let ev = evaluate_table(&self.load_scores()?)?;
            let d = self.cfg.digest();
            self.write_text(&self.report_path("metrics.csv"), &report::metrics_csv(&ev.channels, &ev.hard_split, &d))?;
            self.write_text(&self.report_path("channels.csv"), &report::channels_csv(&ev.channels, &d))?;
            self.write_text(&self.report_path("groups.csv"), &report::groups_csv(&ev.hard_split.report, &d))?;
            self.write_text(&self.report_path("groups_truth.csv"), &report::groups_csv(&ev.truth_groups, &d))?;
            Ok(ev)
        })
    }

    /// Plain-text summary of the evaluation.
    pub fn report(&self) -> Result<String> {
        stage("report", || {
            let ev = evaluate_table(&self.load_scores()?)?;
            let text = report::text_report(&ev.channels, &ev.hard_split, &ev.truth_groups, &self.cfg.digest());
            self.write_text(&self.report_path("report.txt"), &text)?;
            Ok(text)
        })
    }

    pub fn run_all(&self) -> Result<RunSummary> {
        self.echo_config()?;
        self.gen()?;
        let teacher_losses = self.pretrain()?;
        self.build_memory(None)?;
        let aux_losses = self.train_aux()?;
        self.score()?;
        let evaluation = self.eval()?;
        self.report()?;
        Ok(RunSummary {
            teacher_losses,
            aux_losses,
            evaluation,
        })
    }

    /// Sweeps the memory layer set and the evaluation layer set over the
    /// trained models, one metric row per setting.
    pub fn ablate(&self) -> Result<Vec<AblationRow>> {
        stage("ablate", || {
            let train = Dataset::load(&self.train_path())?;
            let test = Dataset::load(&self.test_path())?;
            let pair = self.pair()?;
            let (h, w) = self.image_size();
            let train_taps = tap_all(pair.teacher(), &train.grids())?;
            let test_grids = test.grids();
            let t_taps = tap_all(pair.teacher(), &test_grids)?;
            let s_taps = tap_all(&pair.student, &test_grids)?;
            let seed = self.cfg.memory_init_seed();
            let mut rows = Vec::new();
            let mut run = |sweep: &'static str, mem: &[LayerId], evl: &[LayerId]| -> Result<()> {
                let bank = build_bank(&self.cfg.memory, mem, &train_taps, seed)?;
                let stats = fit_stats(&bank, &train_taps, h, w)?;
                let scorer = Scorer {
                    bank: &bank,
                    stats: &stats,
                    mode: self.cfg.memory.standardize,
                    pair: &pair,
                    evaluation: evl,
                };
                let ev = evaluate_table(&scorer.score(&test, &t_taps, &s_taps)?)?;
                rows.push(AblationRow {
                    sweep,
                    layers: if sweep == "memory" { mem.to_vec() } else { evl.to_vec() },
                    channels: ev.channels,
                });
                Ok(())
            };
            for mem in MEMORY_SWEEP {
                run("memory", mem, &self.cfg.aux.evaluation)?;
            }
            for evl in EVALUATION_SWEEP {
                if let Some(l) = evl.iter().find(|l| !self.cfg.aux.supervision.contains(l)) {
                    return Err(Error::config(format!("evaluation sweep needs {l} in aux.supervision")));
                }
                run("evaluation", &self.cfg.memory.layers, evl)?;
            }
            self.write_text(&self.report_path("ablation.csv"), &ablation_csv(&rows, &self.cfg.digest()))?;
            Ok(rows)
        })
    }
}

/// Every `*.csmd` file in `dir`, in file-name order.
pub fn load_dumps(dir: &Path) -> Result<Vec<FeatureDump>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csmd"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::config(format!("no .csmd dumps in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            FeatureDump::load(p).map_err(|e| match e {
                Error::Parse(pe) => Error::config(format!("{}: {pe}", p.display())),
                other => other,
            })
        })
        .collect()
}

/// One-paragraph description of any artifact file, chosen by its magic.
pub fn inspect(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    let mut s = String::new();
    match bytes.get(..4) {
        Some(b"CSMD") => {
            let d = FeatureDump::from_bytes(&bytes)?;
            let _ = writeln!(s, "feature dump {:?}, {}x{}", d.image_id, d.height, d.width);
            for l in &d.layers {
                let _ = writeln!(s, "  {} {}x{}x{}", l.layer, l.height, l.width, l.channels);
            }
            let _ = writeln!(s, "  mask: {}, predicted: {}", d.mask.is_some(), d.predicted.is_some());
        }
        Some(b"CSMN") => {
            let n = MicroNet::from_bytes(&bytes)?;
            let taps: Vec<&str> = n.taps().iter().map(|t| t.name()).collect();
            let _ = writeln!(
                s,
                "network, {} layers, {} heads, {} parameters, frozen: {}",
                n.layers().len(),
                n.heads().len(),
                n.param_count(),
                n.is_frozen()
            );
            let _ = writeln!(s, "  taps: {}", taps.join(" "));
            let _ = writeln!(s, "  sha256: {}", n.param_checksum());
        }
        Some(b"CSMB") => {
            let b = MemoryBank::from_bytes(&bytes)?;
            let _ = writeln!(s, "memory bank, {} sub-branches", b.layers().len());
            for br in b.branches() {
                let _ = writeln!(
                    s,
                    "  {} {} prototypes of dim {}, tau {}, m {}",
                    br.layer,
                    br.prototypes().len(),
                    br.dim(),
                    br.threshold(),
                    br.momentum()
                );
            }
        }
        Some(b"CSMS") => {
            let st = StandardizationStats::from_bytes(&bytes)?;
            let _ = writeln!(s, "standardization stats, global mean {} std {}", st.global.0, st.global.1);
            for (c, (m, sd)) in &st.per_class {
                let _ = writeln!(s, "  class {c}: mean {m} std {sd}");
            }
        }
        Some(b"CSMX") => {
            let d = Dataset::from_bytes(&bytes)?;
            let _ = writeln!(s, "dataset, {} classes, {} images", d.num_classes, d.images.len());
            for k in [PixelKind::Normal, PixelKind::Hard, PixelKind::Ood] {
                let n: usize = d.images.iter().map(|i| i.kinds.iter().filter(|&&x| x == k).count()).sum();
                let _ = writeln!(s, "  {} pixels: {n}", kind_name(k));
            }
        }
        _ => return Err(Error::contract(format!("{}: unrecognized file type", path.display()))),
    }
    Ok(s)
}
