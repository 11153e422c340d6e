//! Finite-difference gradient harness shared by the gradient and acceptance
//! test targets.

#![allow(dead_code)]

use cosme_core::auxcon::AuxPair;
use cosme_core::micronet::{LayerKind, LayerSpec, MicroNet, ProjectionHead, TapMap};
use cosme_core::tensorgrid::{FeatureMap, Grid, LayerId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 50;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: &'static str,
    pub worst: f64,
    pub kinks: usize,
    pub total: usize,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.worst <= TOL && self.kinks * 100 <= self.total
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: worst relative error {:e}, {} kink coordinates of {}",
            self.name, self.worst, self.kinks, self.total
        )
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Grid {
    Grid::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random linear functional over every tap: loss = sum <R_t, y_t>.
fn probes(net: &MicroNet, image: &Grid, rng: &mut ChaCha8Rng) -> TapMap {
    net.forward_with_taps(image)
        .unwrap()
        .into_iter()
        .map(|(k, m)| {
            let data = (0..m.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            (k, FeatureMap::new(k, m.height, m.width, m.channels, data).unwrap())
        })
        .collect()
}

fn probe_loss(net: &MicroNet, image: &Grid, r: &TapMap) -> f64 {
    let taps = net.forward_with_taps(image).unwrap();
    r.iter()
        .map(|(k, rm)| rm.data.iter().zip(&taps[k].data).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Worst relative error over all parameters, and the number of coordinates
/// where a ReLU switched inside +-h. At such a kink the central difference is
/// meaningless, so the analytic value must instead match one of the one-sided
/// differences.
fn check(params: &[f64], analytic: &[f64], loss_at: impl Fn(&[f64]) -> f64) -> (f64, usize) {
    assert_eq!(params.len(), analytic.len());
    let mid = loss_at(params);
    let mut worst: f64 = 0.0;
    let mut kinks = 0;
    let mut p = params.to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + H;
        let up = loss_at(&p);
        p[i] = orig - H;
        let down = loss_at(&p);
        p[i] = orig;
        let mut e = rel_err(analytic[i], (up - down) / (2.0 * H));
        let (left, right) = ((mid - down) / H, (up - mid) / H);
        if e > TOL && rel_err(left, right) > 100.0 * TOL {
            kinks += 1;
            e = rel_err(analytic[i], left).min(rel_err(analytic[i], right));
        }
        worst = worst.max(e);
    }
    (worst, kinks)
}

fn check_net(name: &'static str, layers: Vec<LayerSpec>, heads: Vec<ProjectionHead>, in_ch: usize, size: usize) -> GradReport {
    let mut r = GradReport { name, worst: 0.0, kinks: 0, total: 0 };
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = MicroNet::seeded(in_ch, layers.clone(), heads.clone(), seed).unwrap();
        assert!(net.param_count() <= 1000, "{name}: {} params", net.param_count());
        let image = grid(&mut rng, size, size, in_ch);
        let probe = probes(&net, &image, &mut rng);
        let analytic = net.backward(&image, &probe).unwrap();
        let (e, k) = check(net.params(), &analytic, |p| {
            let mut n = net.clone();
            n.set_params(p.to_vec()).unwrap();
            probe_loss(&n, &image, &probe)
        });
        r.worst = r.worst.max(e);
        r.kinks += k;
        r.total += net.param_count();
    }
    r
}

fn conv(in_ch: usize, out_ch: usize, stride: usize) -> LayerKind {
    LayerKind::Conv3x3 { in_ch, out_ch, stride }
}

pub fn conv3x3_stride_one() -> GradReport {
    check_net("conv s1", vec![LayerSpec::tapped(conv(2, 3, 1), LayerId::C1)], vec![], 2, 5)
}

pub fn conv3x3_stride_two() -> GradReport {
    check_net("conv s2", vec![LayerSpec::tapped(conv(2, 3, 2), LayerId::C1)], vec![], 2, 6)
}

pub fn affine() -> GradReport {
    let l = LayerKind::Affine { in_dim: 3, out_dim: 4 };
    check_net("affine", vec![LayerSpec::tapped(l, LayerId::C1)], vec![], 3, 4)
}

pub fn relu() -> GradReport {
    let layers = vec![
        LayerSpec::new(LayerKind::Affine { in_dim: 2, out_dim: 5 }),
        LayerSpec::tapped(LayerKind::Relu, LayerId::C1),
        LayerSpec::tapped(LayerKind::Affine { in_dim: 5, out_dim: 3 }, LayerId::C2),
    ];
    check_net("relu", layers, vec![], 2, 4)
}

pub fn output1x1() -> GradReport {
    let l = LayerKind::Output1x1 { in_ch: 3, num_classes: 4 };
    check_net("output1x1", vec![LayerSpec::tapped(l, LayerId::O)], vec![], 3, 4)
}

pub fn projection_heads() -> GradReport {
    let layers = vec![
        LayerSpec::tapped(conv(2, 3, 1), LayerId::C1),
        LayerSpec::new(LayerKind::Relu),
        LayerSpec::tapped(conv(3, 4, 2), LayerId::C2),
        LayerSpec::tapped(LayerKind::Relu, LayerId::C3),
        LayerSpec::tapped(LayerKind::Output1x1 { in_ch: 4, num_classes: 3 }, LayerId::O),
    ];
    let heads = vec![
        ProjectionHead { tap: LayerId::C1, in_ch: 3, out_ch: 5 },
        ProjectionHead { tap: LayerId::C3, in_ch: 4, out_ch: 2 },
    ];
    check_net("heads", layers, heads, 2, 6)
}

/// Student gradients of the batch-summed mimic loss against a frozen teacher.
pub fn mimic_loss() -> GradReport {
    let sup = [LayerId::C2, LayerId::C3, LayerId::O];
    let teacher_layers = vec![
        LayerSpec::new(conv(2, 4, 1)),
        LayerSpec::tapped(LayerKind::Relu, LayerId::C2),
        LayerSpec::new(conv(4, 4, 2)),
        LayerSpec::tapped(LayerKind::Relu, LayerId::C3),
        LayerSpec::tapped(LayerKind::Output1x1 { in_ch: 4, num_classes: 3 }, LayerId::O),
    ];
    let student_layers = vec![
        LayerSpec::new(conv(2, 2, 1)),
        LayerSpec::tapped(LayerKind::Relu, LayerId::C2),
        LayerSpec::new(conv(2, 2, 2)),
        LayerSpec::tapped(LayerKind::Relu, LayerId::C3),
        LayerSpec::tapped(LayerKind::Output1x1 { in_ch: 2, num_classes: 3 }, LayerId::O),
    ];
    let heads = vec![
        ProjectionHead { tap: LayerId::C2, in_ch: 2, out_ch: 4 },
        ProjectionHead { tap: LayerId::C3, in_ch: 2, out_ch: 4 },
    ];
    let mut r = GradReport { name: "mimic loss", worst: 0.0, kinks: 0, total: 0 };
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut teacher = MicroNet::seeded(2, teacher_layers.clone(), vec![], seed).unwrap();
        teacher.freeze();
        let student = MicroNet::seeded(2, student_layers.clone(), heads.clone(), seed + 7).unwrap();
        assert!(student.param_count() <= 1000);
        let pair = AuxPair::new(teacher, student, &sup).unwrap();
        let images: Vec<Grid> = (0..2).map(|_| grid(&mut rng, 6, 6, 2)).collect();

        let mut analytic = vec![0.0; pair.student.param_count()];
        for img in &images {
            let (_, up) = pair.mimic_loss(img, &sup).unwrap();
            for (a, g) in analytic.iter_mut().zip(pair.student.backward(img, &up).unwrap()) {
                *a += g;
            }
        }
        let (e, k) = check(pair.student.params(), &analytic, |p| {
            let mut q = pair.clone();
            q.student.set_params(p.to_vec()).unwrap();
            images.iter().map(|img| q.mimic_loss(img, &sup).unwrap().0).sum()
        });
        r.worst = r.worst.max(e);
        r.kinks += k;
        r.total += pair.student.param_count();
    }
    r
}

/// Every layer kind plus the composite mimic loss.
pub fn all() -> Vec<GradReport> {
    vec![
        conv3x3_stride_one(),
        conv3x3_stride_two(),
        affine(),
        relu(),
        output1x1(),
        projection_heads(),
        mimic_loss(),
    ]
}
