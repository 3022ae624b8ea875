//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Standard-world fits are shared between criteria; each criterion's runtime
//! includes the fits it depends on, as if it had run alone.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use compseg_core::geometry::{align_partial, AlignOptions, Scoring};
use compseg_core::math::{derive_seed, log_add_exp, rng};
use compseg_core::model::{
    map_log_likelihood, position_log_likelihood, prior_weighted_log_likelihood, ClassModel, Lattice, Mixture,
    OutlierCombine, OutlierModel,
};
use compseg_core::pipeline::{initialize, with_gt_priors, Fixture, Segmenter, Supervision};
use compseg_core::prior::{refine_priors_em, EmHistory};
use compseg_core::segmentation::{amodal_segment, amodal_segment_responses, modal_segment};
use compseg_core::synth::{render_scene, SceneRecord, SceneRequest};
use compseg_core::tensor::{dot, normalize};
use compseg_core::training::{loss_cls, loss_rep, loss_seg, train, ParamView, TrainConfig};
use compseg_core::{evaluate, EvalReport, FeatureMap, Label, ModelSet, Result, RunConfig, TrainingState, VmfDictionary};

const SEEDS: u64 = 5;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    runtime: Duration,
    limit: Option<Duration>,
}

impl Outcome {
    fn print(&self) -> bool {
        let within = self.limit.is_none_or(|l| self.runtime < l);
        let ok = self.pass && within;
        let limit = self.limit.map_or(String::new(), |l| format!(" < {}s", l.as_secs()));
        println!(
            "{} {:<24} {} [runtime {:.1}s{limit}{}]",
            if ok { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.runtime.as_secs_f64(),
            if within { "" } else { ", over budget" },
        );
        ok
    }
}

// ---------------------------------------------------------------------------
// shared standard-world fits

struct Fit {
    cfg: RunConfig,
    fx: Fixture,
    models: ModelSet,
    state: TrainingState,
    init_iou: f64,
    em: EmHistory,
    time: Duration,
}

fn fit_seed(cfg: RunConfig) -> Result<Fit> {
    let t = Instant::now();
    let fx = Fixture::build(&cfg)?;
    let (mut models, mut state) = initialize(&fx.examples, &fx.class_ids, &fx.backgrounds, &cfg)?;
    let init_iou = fx.prior_template_iou(&models, &state);
    let em = refine_priors_em(&fx.examples, &mut models, &mut state, &cfg.em_options())?;
    Ok(Fit {
        cfg,
        fx,
        models,
        state,
        init_iou,
        em,
        time: t.elapsed(),
    })
}

struct Fits(Vec<Fit>);

impl Fits {
    fn build() -> Result<Self> {
        (0..SEEDS).map(|s| fit_seed(RunConfig::standard().with_seed(s))).collect::<Result<_>>().map(Self)
    }

    fn time(&self, seeds: usize) -> Duration {
        self.0[..seeds].iter().map(|f| f.time).sum()
    }
}

// ---------------------------------------------------------------------------
// random small models for the oracle and algebra checks

struct Toy {
    dict: VmfDictionary,
    models: Vec<ClassModel>,
    outliers: OutlierModel,
}

fn unit(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
    normalize(&v).unwrap()
}

fn simplex(r: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| r.random_range(0.01..1.0f64).powi(3)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn random_toy(r: &mut ChaCha8Rng, classes: usize) -> Toy {
    let (h, w) = (r.random_range(1..=6), r.random_range(1..=6));
    let (k, d) = (r.random_range(2..=6), r.random_range(3..=6));
    let lattice = Lattice::new(h, w);
    let means = (0..k).map(|_| unit(r, d)).collect();
    let dict = VmfDictionary::new(means, 65.0).unwrap();
    let mixtures = r.random_range(1..=3);
    let models = (0..classes)
        .map(|c| ClassModel {
            class_id: 10 + c,
            lattice,
            kernels: k,
            mixtures: (0..mixtures)
                .map(|_| Mixture {
                    fg: (0..h * w).flat_map(|_| simplex(r, k)).collect(),
                    ctx: (0..h * w).flat_map(|_| simplex(r, k)).collect(),
                    prior: (0..h * w).map(|_| r.random_range(0.001..0.999)).collect(),
                })
                .collect(),
        })
        .collect();
    let n = r.random_range(1..=3);
    let outliers = OutlierModel {
        models: (0..n).map(|_| simplex(r, k)).collect(),
        combine: if r.random_bool(0.5) { OutlierCombine::Max } else { OutlierCombine::Mixture },
    };
    Toy { dict, models, outliers }
}

fn random_map(r: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap {
    let raw = (0..h * w).flat_map(|_| unit(r, d)).collect();
    FeatureMap::new(h, w, d, raw).unwrap()
}

// Brute force, in probability space.
fn kernel_terms(dict: &VmfDictionary, f: &[f64]) -> Vec<f64> {
    dict.means()
        .iter()
        .map(|mu| (dict.sigma() * mu.iter().zip(f).map(|(a, b)| a * b).sum::<f64>()).exp())
        .collect()
}

fn mix(coeffs: &[f64], e: &[f64]) -> f64 {
    coeffs.iter().zip(e).map(|(a, b)| a * b).sum()
}

fn outlier_prob(o: &OutlierModel, e: &[f64]) -> f64 {
    let each: Vec<f64> = o.models.iter().map(|c| mix(c, e)).collect();
    match o.combine {
        OutlierCombine::Max => each.iter().copied().fold(0.0, f64::max),
        OutlierCombine::Mixture => each.iter().sum::<f64>() / each.len() as f64,
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

// ---------------------------------------------------------------------------
// criteria

fn reduction_identity() -> Outcome {
    let t = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let toy = random_toy(&mut r, 1);
        let omega = r.random_range(0.05..0.95);
        let model = toy.models[0].with_constant_prior(omega);
        let lat = model.lattice;
        let (row, col) = (r.random_range(0..lat.height), r.random_range(0..lat.width));
        let m = r.random_range(0..model.mixtures.len());
        let f = unit(&mut r, toy.dict.dim());
        let (fg, ctx) = prior_weighted_log_likelihood(&f, row, col, m, &model, &toy.dict).unwrap();
        let with_prior = log_add_exp(fg, ctx);
        let cell = row * lat.width + col;
        let e = kernel_terms(&toy.dict, &f);
        let plain = (omega * mix(model.fg(m, cell), &e) + (1.0 - omega) * mix(model.ctx(m, cell), &e)).ln();
        // the position-only likelihood must agree as well
        let la = position_log_likelihood(&f, model.fg(m, cell), &toy.dict).unwrap();
        worst = worst.max((la - mix(model.fg(m, cell), &e).ln()).abs() / la.abs());
        worst = worst.max((with_prior - plain).abs() / plain.abs().max(f64::MIN_POSITIVE));
    }
    Outcome {
        name: "reduction identity",
        pass: worst <= 1e-12,
        detail: format!("1000 cells, max rel err {worst:.2e} (<= 1e-12)"),
        runtime: t.elapsed(),
        limit: Some(Duration::from_secs(1)),
    }
}

fn oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let mut mismatches = BTreeMap::<&str, usize>::new();
    let mut worst = 0.0f64;
    let mut note = |name: &'static str, ok: bool| {
        *mismatches.entry(name).or_default() += (!ok) as usize;
    };
    for case in 0..100u64 {
        let mut r = rng(derive_seed(7, &[case]));
        let toy = random_toy(&mut r, 1);
        let model = &toy.models[0];
        let lat = model.lattice;
        let d = toy.dict.dim();
        let map = random_map(&mut r, lat.height, lat.width, d);
        let e: Vec<Vec<f64>> = map.iter_cells().map(|f| kernel_terms(&toy.dict, f)).collect();
        let m = r.random_range(0..model.mixtures.len());

        // modal segmentation and map likelihood
        let modal = modal_segment(&map, m, model, &toy.dict).unwrap();
        let mut total = 0.0;
        let mut ok = true;
        for (i, ei) in e.iter().enumerate() {
            let p = model.prior(m, i);
            let (a, c) = (p * mix(model.fg(m, i), ei), (1.0 - p) * mix(model.ctx(m, i), ei));
            ok &= modal.labels()[i] == if a > c { Label::Foreground } else { Label::Context };
            total += (a + c).ln();
        }
        note("modal_segment", ok);
        let ll = map_log_likelihood(&map, m, model, &toy.dict).unwrap();
        worst = worst.max((ll - total).abs() / total.abs().max(1.0));
        note("map_log_likelihood", close(ll, total, 1e-10));

        // amodal segmentation of a window placed inside the lattice
        let (wh, ww) = (r.random_range(1..=lat.height), r.random_range(1..=lat.width));
        let origin = (r.random_range(0..=lat.height - wh), r.random_range(0..=lat.width - ww));
        let window = random_map(&mut r, wh, ww, d);
        let seg = amodal_segment(&window, (origin.0 as isize, origin.1 as isize), m, model, &toy.outliers, &toy.dict)
            .unwrap();
        let mut ok = true;
        for a in 0..wh {
            for b in 0..ww {
                let ei = kernel_terms(&toy.dict, window.vector(a, b));
                let cell = (a + origin.0) * lat.width + b + origin.1;
                let p = model.prior(m, cell);
                let fg = p * mix(model.fg(m, cell), &ei);
                let ctx = (1.0 - p) * mix(model.ctx(m, cell), &ei);
                let occ = p * outlier_prob(&toy.outliers, &ei);
                let label = if fg > ctx.max(occ) {
                    Label::Foreground
                } else if ctx > fg.max(occ) {
                    Label::Context
                } else {
                    Label::Occluded
                };
                let post = fg / (fg + ctx + occ);
                let got = seg.masks.posterior[a * ww + b];
                worst = worst.max((got - post).abs());
                ok &= seg.labels.get(a, b) == label && close(got, post, 1e-10);
            }
        }
        note("amodal_segment", ok);

        // alignment over classes, mixtures and placements
        let toy2 = {
            let mut r2 = rng(derive_seed(8, &[case]));
            random_toy(&mut r2, 2)
        };
        let lat = toy2.models[0].lattice;
        let (ph, pw) = (r.random_range(1..=lat.height), r.random_range(1..=lat.width));
        let proposal = random_map(&mut r, ph, pw, toy2.dict.dim());
        let responses = toy2.dict.responses(&proposal).unwrap();
        let combined: Vec<_> = toy2.models.iter().map(|c| c.combined()).collect();
        for scoring in [Scoring::Sum, Scoring::Mean] {
            let options = AlignOptions {
                scoring,
                ..AlignOptions::default()
            };
            let got = align_partial(&responses, &toy2.models, &combined, &options).unwrap();
            let want = brute_align(&toy2, &proposal, scoring);
            let ok = got.d == want.0 && got.class_index == want.1 && got.mixture == want.2 && close(got.score, want.3, 1e-10);
            worst = worst.max((got.score - want.3).abs() / want.3.abs().max(1.0));
            note("align_partial", ok);
        }
    }
    let bad: usize = mismatches.values().sum();
    Outcome {
        name: "oracle equivalence",
        pass: bad == 0,
        detail: format!("100 cases each, mismatches {mismatches:?}, max score err {worst:.2e} (<= 1e-10)"),
        runtime: t.elapsed(),
        limit: Some(Duration::from_secs(30)),
    }
}

/// `(d, class, mixture, score)` by explicit zero padding of the proposal.
fn brute_align(toy: &Toy, proposal: &FeatureMap, scoring: Scoring) -> ((usize, usize), usize, usize, f64) {
    let lat = toy.models[0].lattice;
    let (ph, pw) = (proposal.height(), proposal.width());
    let anchor = (ph / 2, pw / 2);
    let mut best: Option<((usize, usize), usize, usize, f64)> = None;
    for dr in 0..lat.height {
        for dc in 0..lat.width {
            for (ci, model) in toy.models.iter().enumerate() {
                for m in 0..model.mixtures.len() {
                    let (mut total, mut n) = (0.0, 0usize);
                    for rr in 0..lat.height {
                        for rc in 0..lat.width {
                            let a = rr as isize - dr as isize + anchor.0 as isize;
                            let b = rc as isize - dc as isize + anchor.1 as isize;
                            if a < 0 || b < 0 || a >= ph as isize || b >= pw as isize {
                                continue; // zero padding
                            }
                            let e = kernel_terms(&toy.dict, proposal.vector(a as usize, b as usize));
                            let cell = rr * lat.width + rc;
                            let p = model.prior(m, cell);
                            let psi: Vec<f64> =
                                model.fg(m, cell).iter().zip(model.ctx(m, cell)).map(|(a, c)| p * a + (1.0 - p) * c).collect();
                            total += mix(&psi, &e).ln();
                            n += 1;
                        }
                    }
                    let score = match scoring {
                        Scoring::Sum => total,
                        Scoring::Mean if n > 0 => total / n as f64,
                        Scoring::Mean => f64::NEG_INFINITY,
                    };
                    if best.is_none_or(|b| score > b.3) {
                        best = Some(((dr, dc), ci, m, score));
                    }
                }
            }
        }
    }
    best.unwrap()
}

fn cem_monotonicity() -> Outcome {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for s in 0..SEEDS {
        let mut cfg = RunConfig::standard().with_seed(s);
        cfg.epsilon = 0.0;
        let fit = fit_seed(cfg).unwrap();
        let j = fit.em.objectives();
        let gain = j.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        let ok = j.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
        pass &= ok;
        lines.push(format!("{} iters, min gain {gain:.1e}", j.len() - 1));
    }
    Outcome {
        name: "CEM monotonicity",
        pass,
        detail: format!("eps 0, seeds [{}]", lines.join(", ")),
        runtime: t.elapsed(),
        limit: Some(Duration::from_secs(60)),
    }
}

fn prior_quality(fits: &Fits) -> Outcome {
    let t = Instant::now();
    let mut pass = true;
    let mut lines = Vec::new();
    for f in &fits.0 {
        let after = f.fx.prior_template_iou(&f.models, &f.state);
        pass &= after >= 0.7 && after > f.init_iou;
        lines.push(format!("{:.4}->{:.4}", f.init_iou, after));
    }
    Outcome {
        name: "prior quality",
        pass,
        detail: format!("template IoU before->after EM, 5 seeds: {}", lines.join(" ")),
        runtime: t.elapsed() + fits.time(SEEDS as usize),
        limit: Some(Duration::from_secs(120)),
    }
}

fn bench_report(seg: &Segmenter, bench: &[SceneRecord], records: &[compseg_core::EvalRecord], sup: Supervision) -> EvalReport {
    let mut preds = BTreeMap::new();
    for r in bench {
        let p = seg.segment(&r.map, &r.modal_box, Some(&r.amodal_box), sup).unwrap();
        preds.insert(r.id.clone(), p.labels);
    }
    evaluate(records, &preds).unwrap()
}

fn ablation(fits: &Fits) -> Outcome {
    let t = Instant::now();
    let f = &fits.0[0];
    let records = f.fx.eval_records();
    let gt = f.fx.gt_labels();
    let variants = [
        f.models.clone(),
        f.models.with_constant_prior(f.cfg.omega),
        with_gt_priors(&f.models, &f.fx.examples, &f.state.assignments, &gt).unwrap(),
    ];
    let scores: Vec<f64> = variants
        .iter()
        .map(|m| bench_report(&Segmenter::new(m.clone(), &f.cfg), &f.fx.bench, &records, Supervision::Amodal).grand.amodal)
        .collect();
    let (learned, none, gtp) = (scores[0], scores[1], scores[2]);
    Outcome {
        name: "ablation trend",
        pass: learned - none >= 0.05 && gtp >= learned - 0.03,
        detail: format!(
            "amodal mIoU no-prior {:.1} < learned {:.1} (gap >= 5), GT-prior {:.1} (>= learned - 3)",
            100.0 * none,
            100.0 * learned,
            100.0 * gtp
        ),
        runtime: t.elapsed() + fits.time(1),
        limit: Some(Duration::from_secs(300)),
    }
}

fn occlusion_degradation(fits: &Fits) -> Outcome {
    let t = Instant::now();
    let f = &fits.0[0];
    let seg = Segmenter::new(f.models.clone(), &f.cfg);
    let rows = bench_report(&seg, &f.fx.bench, &f.fx.eval_records(), Supervision::Amodal).by_fg_level();
    let at = |l: u8| rows.iter().find(|r| r.fg_level == l).map(|r| r.amodal).unwrap_or(f64::NAN);
    let drop = at(0) - at(3);
    Outcome {
        name: "occlusion degradation",
        pass: drop <= 0.10,
        detail: format!(
            "amodal mIoU by FG level [{}], L0-L3 drop {:.1} (<= 10)",
            rows.iter().map(|r| format!("{:.1}", 100.0 * r.amodal)).collect::<Vec<_>>().join(", "),
            100.0 * drop
        ),
        runtime: t.elapsed() + fits.time(1),
        limit: Some(Duration::from_secs(300)),
    }
}

/// 100 trials at FG-L0/L1 then 100 at FG-L2, random class, pose, shift and
/// clutter level.
fn alignment_trials(f: &Fit) -> Vec<SceneRecord> {
    let world = &f.fx.world;
    let s = world.spec.max_shift as i32;
    (0..200u64)
        .map(|n| {
            let mut r = rng(derive_seed(f.cfg.seed, &[90, n]));
            let fg_level = if n < 100 { (n % 2) as u8 } else { 2 };
            let req = SceneRequest {
                class_id: r.random_range(0..world.spec.classes),
                pose: r.random_range(0..world.spec.poses),
                shift: (r.random_range(-s..=s), r.random_range(-s..=s)),
                fg_level,
                bg_level: if fg_level == 0 { 0 } else { r.random_range(1..=3) },
                seed: derive_seed(f.cfg.seed, &[91, n]),
            };
            render_scene(world, &req).unwrap()
        })
        .collect()
}

fn alignment_recovery(fits: &Fits) -> Outcome {
    let t = Instant::now();
    let f = &fits.0[0];
    let seg = Segmenter::new(f.models.clone(), &f.cfg);
    let trials = alignment_trials(f);
    let hits: Vec<bool> = trials
        .iter()
        .map(|r| {
            let p = seg.segment(&r.map, &r.modal_box, None, Supervision::Modal).unwrap();
            p.image_to_rep == (-(r.shift.0 as isize), -(r.shift.1 as isize))
        })
        .collect();
    let low = hits[..100].iter().filter(|&&h| h).count();
    let mid = hits[100..].iter().filter(|&&h| h).count();
    Outcome {
        name: "alignment recovery",
        pass: low >= 95 && mid >= 80,
        detail: format!("exact shift: FG-L0/L1 {low}/100 (>= 95), FG-L2 {mid}/100 (>= 80)"),
        runtime: t.elapsed() + fits.time(1),
        limit: Some(Duration::from_secs(60)),
    }
}

fn amodal_box(fits: &Fits) -> Outcome {
    let t = Instant::now();
    let f = &fits.0[0];
    let seg = Segmenter::new(f.models.clone(), &f.cfg);
    let (mut iou, mut n, mut contained, mut total) = (0.0, 0usize, 0usize, 0usize);
    for r in &f.fx.bench {
        let p = seg.segment(&r.map, &r.modal_box, None, Supervision::Modal).unwrap();
        if r.fg_level == 1 || r.fg_level == 2 {
            iou += p.amodal_box.iou(&r.amodal_box);
            n += 1;
        }
        contained += p.amodal_box.contains(&r.modal_box) as usize;
        total += 1;
    }
    let iou = iou / n as f64;
    Outcome {
        name: "amodal box",
        pass: iou >= 0.8 && contained == total,
        detail: format!("mean box IoU FG-L1/L2 {iou:.3} over {n} (>= 0.8), contains modal box {contained}/{total}"),
        runtime: t.elapsed() + fits.time(1),
        limit: Some(Duration::from_secs(60)),
    }
}

fn random_point(base: &ModelSet, r: &mut ChaCha8Rng) -> ParamView {
    let mut p = ParamView::from_models(base, true);
    let v: Vec<f64> = p
        .flat()
        .into_iter()
        .map(|x| {
            let n: f64 = r.sample(StandardNormal);
            x.max(-30.0) + 0.5 * n
        })
        .collect();
    p.set_flat(&v);
    p
}

/// Relative error of the analytic directional derivative against a central
/// difference along a random unit direction.
fn directional_error(loss: impl Fn(&ParamView) -> (f64, ParamView), p: &ParamView, r: &mut ChaCha8Rng) -> f64 {
    let (_, g) = loss(p);
    let x = p.flat();
    let mut dir: Vec<f64> = x.iter().map(|_| r.sample(StandardNormal)).collect();
    let norm = dot(&dir, &dir).sqrt();
    dir.iter_mut().for_each(|d| *d /= norm);
    let analytic = dot(&g.flat(), &dir);
    let h = 1e-5;
    let at = |t: f64| {
        let mut q = p.clone();
        q.set_flat(&x.iter().zip(&dir).map(|(a, d)| a + t * d).collect::<Vec<_>>());
        loss(&q).0
    };
    let numeric = (at(h) - at(-h)) / (2.0 * h);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn gradient_checks() -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig::small();
    let fit = fit_seed(cfg).unwrap();
    let (models, fx) = (&fit.models, &fit.fx);
    let gt = fx.gt_labels();
    let mut worst = [0.0f64; 3];
    let mut r = rng(4242);
    for _ in 0..20 {
        let p = random_point(models, &mut r);
        let n = r.random_range(0..fx.examples.len());
        let e = &fx.examples[n];
        let m = r.random_range(0..models.mixtures());
        let errs = [
            directional_error(|q| loss_cls(q, models, &e.map, e.class_index).unwrap(), &p, &mut r),
            directional_error(|q| loss_rep(q, models, &e.map, e.class_index, m, &gt[n]).unwrap(), &p, &mut r),
            directional_error(
                |q| loss_seg(q, models, &e.map, e.class_index, m, &e.modal_box, fit.cfg.train.delta).unwrap(),
                &p,
                &mut r,
            ),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    Outcome {
        name: "gradient checks",
        pass: worst.iter().all(|&e| e <= 1e-4),
        detail: format!(
            "20 points, max rel err cls {:.1e} rep {:.1e} seg {:.1e} (<= 1e-4)",
            worst[0], worst[1], worst[2]
        ),
        runtime: t.elapsed(),
        limit: Some(Duration::from_secs(30)),
    }
}

fn training_sanity(fits: &Fits) -> Outcome {
    let t = Instant::now();
    let mut decreasing = 0;
    let mut lines = Vec::new();
    for (s, f) in fits.0.iter().enumerate() {
        let cfg = TrainConfig {
            epochs: 5,
            seed: s as u64,
            ..f.cfg.train
        };
        let (_, _, h) = train(&f.fx.examples, &f.models, &cfg, |_, _| Ok(())).unwrap();
        let totals = h.totals();
        let ok = totals.windows(2).all(|w| w[1] < w[0]);
        decreasing += ok as usize;
        lines.push(format!("{:.0}->{:.0}{}", totals[0], totals[totals.len() - 1], if ok { "" } else { "!" }));
    }
    let f = &fits.0[0];
    let frozen = TrainConfig {
        epochs: 5,
        lr: 0.0,
        mu_lr: 0.0,
        ..f.cfg.train
    };
    let (_, params, _) = train(&f.fx.examples, &f.models, &frozen, |_, _| Ok(())).unwrap();
    let start = ParamView::from_models(&f.models, frozen.train_mu);
    let identical = params.flat().iter().zip(start.flat()).all(|(a, b)| a.to_bits() == b.to_bits());
    Outcome {
        name: "training sanity",
        pass: decreasing >= 4 && identical,
        detail: format!(
            "strictly decreasing {decreasing}/5 (>= 4) [{}], zero-lr bit-identical {identical}",
            lines.join(" ")
        ),
        runtime: t.elapsed() + fits.time(SEEDS as usize),
        limit: Some(Duration::from_secs(180)),
    }
}

fn mask_algebra() -> Outcome {
    let t = Instant::now();
    let mut r = rng(99);
    let mut bad = 0;
    let mut counts = [0usize; 3];
    for _ in 0..1000 {
        let toy = random_toy(&mut r, 1);
        let model = &toy.models[0];
        let lat = model.lattice;
        let m = r.random_range(0..model.mixtures.len());
        let map = random_map(&mut r, lat.height, lat.width, toy.dict.dim());
        let seg = amodal_segment_responses(&toy.dict.responses(&map).unwrap(), (0, 0), m, model, &toy.outliers).unwrap();
        let k = &seg.masks;
        for i in 0..lat.cells() {
            bad += (k.modal[i] && k.occluded[i]) as usize;
            bad += (k.amodal[i] != (k.modal[i] || k.occluded[i])) as usize;
        }
        for l in seg.labels.labels() {
            counts[match l {
                Label::Foreground => 0,
                Label::Context => 1,
                Label::Occluded => 2,
            }] += 1;
        }
    }
    Outcome {
        name: "mask algebra",
        pass: bad == 0 && counts.iter().all(|&c| c > 0),
        detail: format!("1000 segmentations, violations {bad}, labels fg/ctx/occ {counts:?}"),
        runtime: t.elapsed(),
        limit: None,
    }
}

fn main() {
    // Plain `cargo test` passes harness flags; listing asks for no tests.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut ok = true;
    for o in [reduction_identity(), oracle_equivalence(), mask_algebra(), gradient_checks(), cem_monotonicity()] {
        ok &= o.print();
    }
    let fits = Fits::build().unwrap();
    for run in [
        prior_quality,
        ablation,
        occlusion_degradation,
        alignment_recovery,
        amodal_box,
        training_sanity,
    ] {
        ok &= run(&fits).print();
    }
    if !ok {
        std::process::exit(1);
    }
}
