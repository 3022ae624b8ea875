//! Classification, representation and weak segmentation losses with
//! analytic gradients, and the SGD-with-momentum loop over the compositional
//! head.
//!
//! Trainable parameters are per-cell coefficient logits (softmax gives the
//! simplex weights) and, optionally, the kernel means. Means are used as
//! directions: the gradient passes through their normalization and they get
//! their own step size. Priors and the
//! outlier model stay fixed. Within one step the labels `z` and the chosen
//! mixture are constants.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::TrainingExample;
use crate::error::{Error, Result};
use crate::math::{ln_guarded, log_add_exp, log_sum_exp};
use crate::model::{ModelSet, OutlierCombine};
use crate::segmentation::tri_state;
use crate::tensor::{dot, BBox, FeatureMap, Label, LabelGrid};
use crate::vmf::VmfDictionary;

/// Posterior clamp applied before the logs of the segmentation loss.
pub const POSTERIOR_CLAMP: f64 = 1e-6;
const LOGIT_FLOOR: f64 = -700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub delta: f64,
    pub lr: f64,
    /// Step size of the kernel means. Their gradient sums `sigma`-scaled
    /// terms over every cell, so they need a far smaller rate.
    pub mu_lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Update the kernel means as well as the coefficients.
    pub train_mu: bool,
    /// Segment with the true class instead of the predicted one.
    pub use_gt_class: bool,
    /// Re-run prior refinement after every epoch.
    pub refine_priors: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma1: 2.0,
            gamma2: 1.0,
            delta: 0.05,
            lr: 0.01,
            mu_lr: 1e-6,
            momentum: 0.9,
            epochs: 10,
            seed: 0,
            train_mu: true,
            use_gt_class: true,
            refine_priors: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.gamma1, self.gamma2, self.delta, self.lr, self.mu_lr, self.momentum]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !ok || self.epochs == 0 || self.momentum >= 1.0 {
            return Err(Error::Config(
                "training rates must be finite and non-negative, momentum < 1, epochs >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Trainable tensors; also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamView {
    /// `[class][mixture]`, `cells x K` logits.
    pub fg: Vec<Vec<Vec<f64>>>,
    pub ctx: Vec<Vec<Vec<f64>>>,
    /// Raw kernel means, `K x D`.
    pub mu: Vec<Vec<f64>>,
    pub train_mu: bool,
}

fn logits(coeffs: &[f64]) -> Vec<f64> {
    coeffs.iter().map(|&c| ln_guarded(c).max(LOGIT_FLOOR)).collect()
}

fn softmax_cells(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for cell in out.chunks_exact_mut(k) {
        crate::math::softmax_in_place(cell);
    }
    out
}

impl ParamView {
    pub fn from_models(models: &ModelSet, train_mu: bool) -> Self {
        let map = |f: fn(&crate::model::Mixture) -> &Vec<f64>| {
            models
                .classes
                .iter()
                .map(|c| c.mixtures.iter().map(|m| logits(f(m))).collect())
                .collect()
        };
        Self {
            fg: map(|m| &m.fg),
            ctx: map(|m| &m.ctx),
            mu: models.dictionary.means().to_vec(),
            train_mu,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z3 = |v: &Vec<Vec<Vec<f64>>>| {
            v.iter()
                .map(|c| c.iter().map(|m| vec![0.0; m.len()]).collect())
                .collect()
        };
        Self {
            fg: z3(&self.fg),
            ctx: z3(&self.ctx),
            mu: self.mu.iter().map(|m| vec![0.0; m.len()]).collect(),
            train_mu: self.train_mu,
        }
    }

    /// Zeros the blocks flagged in `blocks` and the means.
    fn clear(&mut self, blocks: &[Vec<bool>]) {
        for (ci, on) in blocks.iter().enumerate() {
            for m in (0..on.len()).filter(|&m| on[m]) {
                self.fg[ci][m].fill(0.0);
                self.ctx[ci][m].fill(0.0);
            }
        }
        self.mu.iter_mut().for_each(|m| m.fill(0.0));
    }

    /// Coefficient logits first (fg then ctx, class-major), then the means
    /// when trainable.
    pub fn flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.fg.iter().flatten().flatten().copied().collect();
        v.extend(self.ctx.iter().flatten().flatten());
        if self.train_mu {
            v.extend(self.mu.iter().flatten());
        }
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let mut it = v.iter().copied();
        let train_mu = self.train_mu;
        for x in self.fg.iter_mut().flatten().flatten() {
            *x = it.next().expect("flat length");
        }
        for x in self.ctx.iter_mut().flatten().flatten() {
            *x = it.next().expect("flat length");
        }
        if train_mu {
            for x in self.mu.iter_mut().flatten() {
                *x = it.next().expect("flat length");
            }
        }
    }

    /// Materialized model set: softmax coefficients, normalized means.
    pub fn apply(&self, base: &ModelSet) -> Result<ModelSet> {
        let mut out = base.clone();
        let k = base.kernels();
        for (ci, class) in out.classes.iter_mut().enumerate() {
            for (m, mix) in class.mixtures.iter_mut().enumerate() {
                mix.fg = softmax_cells(&self.fg[ci][m], k);
                mix.ctx = softmax_cells(&self.ctx[ci][m], k);
            }
        }
        out.dictionary = VmfDictionary::new(self.mu.clone(), base.dictionary.sigma())?;
        Ok(out)
    }

    fn head<'a>(&self, base: &'a ModelSet) -> Head<'a> {
        let k = base.kernels();
        let soft = |v: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<Vec<f64>>> {
            v.iter().map(|c| c.iter().map(|l| softmax_cells(l, k)).collect()).collect()
        };
        let norms: Vec<f64> = self.mu.iter().map(|m| dot(m, m).sqrt()).collect();
        Head {
            base,
            fg: soft(&self.fg),
            ctx: soft(&self.ctx),
            mu: self.mu.iter().zip(&norms).map(|(m, n)| m.iter().map(|x| x / n).collect()).collect(),
            norms,
            sigma: base.dictionary.sigma(),
        }
    }
}

/// Materialized head at one parameter point. Means are used as directions.
struct Head<'a> {
    base: &'a ModelSet,
    /// `[class][mixture]` simplex weights, `cells x K`.
    fg: Vec<Vec<Vec<f64>>>,
    ctx: Vec<Vec<Vec<f64>>>,
    /// Normalized means and the norms of the raw parameters.
    mu: Vec<Vec<f64>>,
    norms: Vec<f64>,
    sigma: f64,
}

impl Head<'_> {
    /// Recomputes the flagged blocks and the means after `params` moved.
    fn refresh(&mut self, params: &ParamView, blocks: &[Vec<bool>]) {
        let k = self.kernels();
        let copy = |dst: &mut Vec<Vec<Vec<f64>>>, src: &Vec<Vec<Vec<f64>>>| {
            let flags = blocks.iter().flatten();
            for ((d, s), _) in dst.iter_mut().flatten().zip(src.iter().flatten()).zip(flags).filter(|x| *x.1) {
                d.copy_from_slice(s);
                d.chunks_exact_mut(k).for_each(|c| {
                    crate::math::softmax_in_place(c);
                });
            }
        };
        copy(&mut self.fg, &params.fg);
        copy(&mut self.ctx, &params.ctx);
        for ((d, s), n) in self.mu.iter_mut().zip(&params.mu).zip(self.norms.iter_mut()) {
            *n = dot(s, s).sqrt();
            d.iter_mut().zip(s).for_each(|(d, s)| *d = s / *n);
        }
    }

    /// Turns gradients taken with respect to the normalized means into
    /// gradients of the raw parameters: `(I - mu mu^T) g / |u|`.
    fn finish(&self, grad: &mut ParamView) {
        if !grad.train_mu {
            return;
        }
        for ((g, mu), n) in grad.mu.iter_mut().zip(&self.mu).zip(&self.norms) {
            let radial = dot(g, mu);
            g.iter_mut().zip(mu).for_each(|(x, m)| *x = (*x - radial * m) / n);
        }
    }

    fn kernels(&self) -> usize {
        self.mu.len()
    }

    fn weights<'w>(&self, coeffs: &'w [Vec<Vec<f64>>], ci: usize, m: usize, cell: usize) -> &'w [f64] {
        let k = self.kernels();
        &coeffs[ci][m][cell * k..(cell + 1) * k]
    }

    /// `sigma * mu_k^T f_i` with the normalized means.
    fn responses(&self, map: &FeatureMap) -> Scaled {
        let k = self.kernels();
        let mut s = Vec::with_capacity(map.cells() * k);
        for f in map.iter_cells() {
            s.extend(self.mu.iter().map(|m| self.sigma * dot(m, f)));
        }
        Scaled::new(s, k)
    }
}

/// Kernel responses with `exp(s - max s)` per cell, so every weighted
/// log-sum-exp over a cell is a dot product.
struct Scaled {
    k: usize,
    s: Vec<f64>,
    e: Vec<f64>,
    mx: Vec<f64>,
}

impl Scaled {
    fn new(s: Vec<f64>, k: usize) -> Self {
        let mut e = Vec::with_capacity(s.len());
        let mut mx = Vec::with_capacity(s.len() / k);
        for cell in s.chunks_exact(k) {
            let m = cell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            e.extend(cell.iter().map(|&x| (x - m).exp()));
            mx.push(m);
        }
        Self { k, s, e, mx }
    }

    fn cells(&self) -> usize {
        self.mx.len()
    }

    fn cell(&self, i: usize) -> &[f64] {
        &self.s[i * self.k..(i + 1) * self.k]
    }

    /// Log-likelihood of cell `i` under weights `w`; fills the
    /// responsibilities `w_k exp(s_k - ll)` when `resp` is given.
    #[inline]
    fn terms(&self, i: usize, w: &[f64], resp: Option<&mut [f64]>) -> f64 {
        let e = &self.e[i * self.k..(i + 1) * self.k];
        let d = dot(w, e);
        if d > f64::MIN_POSITIVE {
            if let Some(resp) = resp {
                resp.iter_mut().zip(w.iter().zip(e)).for_each(|(r, (w, e))| *r = w * e / d);
            }
            return d.ln() + self.mx[i];
        }
        // all weight sits on kernels far below the cell maximum
        let s = self.cell(i);
        let ll = crate::math::weighted_log_sum_exp(w, s);
        if let Some(resp) = resp {
            for k in 0..w.len() {
                resp[k] = if w[k] > 0.0 { w[k] * (s[k] - ll).exp() } else { 0.0 };
            }
        }
        ll
    }
}

/// Outlier log-likelihood of cell `i` and, when asked, its derivative with
/// respect to the responses.
fn outlier_terms(o: &crate::model::OutlierModel, sc: &Scaled, i: usize, ds: Option<&mut [f64]>) -> f64 {
    let lls: Vec<f64> = o.models.iter().map(|w| sc.terms(i, w, None)).collect();
    match o.combine {
        OutlierCombine::Max => {
            let (j, &ll) = lls
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |a, x| if *x.1 > *a.1 { x } else { a });
            if let Some(ds) = ds {
                sc.terms(i, &o.models[j], Some(ds));
            }
            ll
        }
        OutlierCombine::Mixture => {
            let total = log_sum_exp(&lls);
            if let Some(ds) = ds {
                ds.fill(0.0);
                let mut tmp = vec![0.0; sc.k];
                for (w, &llj) in o.models.iter().zip(&lls) {
                    sc.terms(i, w, Some(&mut tmp));
                    let a = (llj - total).exp();
                    ds.iter_mut().zip(&tmp).for_each(|(d, t)| *d += a * t);
                }
            }
            total - (o.models.len() as f64).ln()
        }
    }
}

/// Per-cell log terms `(F, C, O)` of one class/mixture and, for gradients,
/// the responsibilities within `A`, `chi` and the outlier model.
struct CellTerms {
    lf: Vec<f64>,
    lc: Vec<f64>,
    lo: Vec<f64>,
    /// `cells x K` each; empty without gradients.
    ra: Vec<f64>,
    rc: Vec<f64>,
    ro: Vec<f64>,
}

fn cell_terms(head: &Head, sc: &Scaled, ci: usize, m: usize, outliers: bool, resp: bool) -> CellTerms {
    let model = &head.base.classes[ci];
    let (n, k) = (sc.cells(), sc.k);
    let size = |on: bool| if on { n * k } else { 0 };
    let mut t = CellTerms {
        lf: vec![0.0; n],
        lc: vec![0.0; n],
        lo: vec![f64::NEG_INFINITY; n],
        ra: vec![0.0; size(resp)],
        rc: vec![0.0; size(resp)],
        ro: vec![0.0; size(resp && outliers)],
    };
    for i in 0..n {
        let p = model.prior(m, i);
        let ra = resp.then(|| &mut t.ra[i * k..(i + 1) * k]);
        t.lf[i] = ln_guarded(p) + sc.terms(i, head.weights(&head.fg, ci, m, i), ra);
        let rc = resp.then(|| &mut t.rc[i * k..(i + 1) * k]);
        t.lc[i] = ln_guarded(1.0 - p) + sc.terms(i, head.weights(&head.ctx, ci, m, i), rc);
        if outliers {
            let ro = resp.then(|| &mut t.ro[i * k..(i + 1) * k]);
            t.lo[i] = ln_guarded(p) + outlier_terms(&head.base.outliers, sc, i, ro);
        }
    }
    t
}

/// Chains per-cell derivatives `dL/dF`, `dL/dC`, `dL/dO` into the logits of
/// `(ci, m)` and the kernel means.
#[allow(clippy::too_many_arguments)]
fn backprop(
    head: &Head,
    map: &FeatureMap,
    t: &CellTerms,
    ci: usize,
    m: usize,
    dlf: &[f64],
    dlc: &[f64],
    dlo: Option<&[f64]>,
    grad: &mut ParamView,
) {
    let k = head.kernels();
    let sigma = head.sigma;
    for i in 0..t.lf.len() {
        let (a, c) = (head.weights(&head.fg, ci, m, i), head.weights(&head.ctx, ci, m, i));
        let (ra, rc) = (&t.ra[i * k..(i + 1) * k], &t.rc[i * k..(i + 1) * k]);
        if dlf[i] != 0.0 {
            let gf = &mut grad.fg[ci][m][i * k..(i + 1) * k];
            for j in 0..k {
                gf[j] += dlf[i] * (ra[j] - a[j]);
            }
        }
        if dlc[i] != 0.0 {
            let gc = &mut grad.ctx[ci][m][i * k..(i + 1) * k];
            for j in 0..k {
                gc[j] += dlc[i] * (rc[j] - c[j]);
            }
        }
        if grad.train_mu {
            let f = map.cell(i);
            for j in 0..k {
                let mut ds = dlf[i] * ra[j] + dlc[i] * rc[j];
                if let Some(dlo) = dlo {
                    ds += dlo[i] * t.ro[i * k + j];
                }
                if ds != 0.0 {
                    grad.mu[j].iter_mut().zip(f).for_each(|(g, x)| *g += ds * sigma * x);
                }
            }
        }
    }
}

/// Per-class scores `max_m ln p(F | m, y) / cells` and the maximizing
/// mixtures.
fn class_scores(head: &Head, sc: &Scaled) -> (Vec<f64>, Vec<usize>) {
    let n = sc.cells();
    let mut scores = Vec::with_capacity(head.fg.len());
    let mut best_m = Vec::with_capacity(head.fg.len());
    for ci in 0..head.fg.len() {
        let model = &head.base.classes[ci];
        let mut best = (f64::NEG_INFINITY, 0);
        for m in 0..head.fg[ci].len() {
            let ll: f64 = (0..n)
                .map(|i| {
                    let p = model.prior(m, i);
                    let f = ln_guarded(p) + sc.terms(i, head.weights(&head.fg, ci, m, i), None);
                    let c = ln_guarded(1.0 - p) + sc.terms(i, head.weights(&head.ctx, ci, m, i), None);
                    log_add_exp(f, c)
                })
                .sum();
            if m == 0 || ll > best.0 {
                best = (ll, m);
            }
        }
        scores.push(best.0 / n as f64);
        best_m.push(best.1);
    }
    (scores, best_m)
}

/// Cross-entropy of the softmax over per-class scores
/// `max_m ln p(F | m, y) / cells`.
pub fn loss_cls(params: &ParamView, base: &ModelSet, map: &FeatureMap, y_true: usize) -> Result<(f64, ParamView)> {
    let head = params.head(base);
    let sc = head.responses(map);
    let mut grad = params.zeros_like();
    let (scores, best_m) = class_scores(&head, &sc);
    let loss = cls_terms(&head, &sc, map, &scores, &best_m, y_true, 1.0, Some(&mut grad));
    head.finish(&mut grad);
    Ok((loss, grad))
}

/// Adds `w` times the gradient into `grad` when given; returns the
/// unweighted loss.
#[allow(clippy::too_many_arguments)]
fn cls_terms(
    head: &Head,
    sc: &Scaled,
    map: &FeatureMap,
    scores: &[f64],
    best_m: &[usize],
    y_true: usize,
    w: f64,
    grad: Option<&mut ParamView>,
) -> f64 {
    if scores.len() < 2 {
        log::warn!("classification loss with a single class is constant");
    }
    let lse = log_sum_exp(scores);
    let loss = lse - scores[y_true];
    let Some(grad) = grad else {
        return loss;
    };
    let n = map.cells() as f64;
    for ci in 0..scores.len() {
        let g = w * ((scores[ci] - lse).exp() - if ci == y_true { 1.0 } else { 0.0 });
        if g == 0.0 {
            continue;
        }
        let t = cell_terms(head, sc, ci, best_m[ci], false, true);
        let wf: Vec<f64> = t.lf.iter().zip(&t.lc).map(|(&f, &c)| (f - log_add_exp(f, c)).exp()).collect();
        let dlf: Vec<f64> = wf.iter().map(|w| g / n * w).collect();
        let dlc: Vec<f64> = wf.iter().map(|w| g / n * (1.0 - w)).collect();
        backprop(head, map, &t, ci, best_m[ci], &dlf, &dlc, None, grad);
    }
    loss
}

/// `-sum` of the label-selected prior-weighted log terms; occluded cells
/// contribute nothing.
pub fn loss_rep(
    params: &ParamView,
    base: &ModelSet,
    map: &FeatureMap,
    class_index: usize,
    m: usize,
    z: &LabelGrid,
) -> Result<(f64, ParamView)> {
    let head = params.head(base);
    let sc = head.responses(map);
    let mut grad = params.zeros_like();
    let t = cell_terms(&head, &sc, class_index, m, false, true);
    let loss = rep_terms(&head, map, &t, class_index, m, z, 1.0, Some(&mut grad));
    head.finish(&mut grad);
    Ok((loss, grad))
}

#[allow(clippy::too_many_arguments)]
fn rep_terms(
    head: &Head,
    map: &FeatureMap,
    t: &CellTerms,
    class_index: usize,
    m: usize,
    z: &LabelGrid,
    w: f64,
    grad: Option<&mut ParamView>,
) -> f64 {
    let mut loss = 0.0;
    let n = map.cells();
    let (mut dlf, mut dlc) = (vec![0.0; n], vec![0.0; n]);
    for (i, &l) in z.labels().iter().enumerate() {
        match l {
            Label::Foreground => {
                loss -= t.lf[i];
                dlf[i] = -w;
            }
            Label::Context => {
                loss -= t.lc[i];
                dlc[i] = -w;
            }
            Label::Occluded => {}
        }
    }
    if let Some(grad) = grad {
        backprop(head, map, t, class_index, m, &dlf, &dlc, None, grad);
    }
    loss
}

/// Multiple-instance loss on a posterior grid and its derivative.
///
/// Positive bags are the rows and columns of cells inside `bbox`; negative
/// bags are the full grid rows and columns lying entirely outside it. Each
/// bag is scored by its maximum (the first maximal cell takes the
/// gradient). Adds `delta` times the squared differences of 4-neighbours.
pub fn mil_loss(posterior: &[f64], height: usize, width: usize, bbox: &BBox, delta: f64) -> (f64, Vec<f64>) {
    let (rows, cols) = bbox.cell_ranges(height, width);
    let mut grad = vec![0.0; posterior.len()];
    let mut loss = 0.0;
    let clamp = |x: f64| x.clamp(POSTERIOR_CLAMP, 1.0 - POSTERIOR_CLAMP);
    let inside = |x: f64| (POSTERIOR_CLAMP..=1.0 - POSTERIOR_CLAMP).contains(&x);
    let mut bag = |cells: &mut dyn Iterator<Item = usize>, positive: bool, grad: &mut Vec<f64>| {
        let mut best = usize::MAX;
        let mut mx = f64::NEG_INFINITY;
        for i in cells {
            if posterior[i] > mx {
                mx = posterior[i];
                best = i;
            }
        }
        if best == usize::MAX {
            return;
        }
        if positive {
            loss -= clamp(mx).ln();
            if inside(mx) {
                grad[best] -= 1.0 / mx;
            }
        } else {
            loss -= (1.0 - clamp(mx)).ln();
            if inside(mx) {
                grad[best] += 1.0 / (1.0 - mx);
            }
        }
    };
    if !rows.is_empty() && !cols.is_empty() {
        for r in rows.clone() {
            bag(&mut cols.clone().map(|c| r * width + c), true, &mut grad);
        }
        for c in cols.clone() {
            bag(&mut rows.clone().map(|r| r * width + c), true, &mut grad);
        }
    }
    let mut negatives = 0;
    for r in (0..height).filter(|r| !rows.contains(r)) {
        bag(&mut (0..width).map(|c| r * width + c), false, &mut grad);
        negatives += 1;
    }
    for c in (0..width).filter(|c| !cols.contains(c)) {
        bag(&mut (0..height).map(|r| r * width + c), false, &mut grad);
        negatives += 1;
    }
    if negatives == 0 {
        log::debug!("box covers the whole grid; no negative bags");
    }
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            for j in [(c + 1 < width).then(|| i + 1), (r + 1 < height).then(|| i + width)]
                .into_iter()
                .flatten()
            {
                let d = posterior[i] - posterior[j];
                loss += delta * d * d;
                grad[i] += 2.0 * delta * d;
                grad[j] -= 2.0 * delta * d;
            }
        }
    }
    (loss, grad)
}

/// Tri-state posterior grid of one class/mixture at the current parameters.
fn posterior_grid(t: &CellTerms) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = t.lf.len();
    let (mut pf, mut pc, mut po) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let (_, p) = tri_state(t.lf[i], t.lc[i], t.lo[i]);
        let mx = t.lf[i].max(t.lc[i]).max(t.lo[i]);
        let (a, b, c) = ((t.lf[i] - mx).exp(), (t.lc[i] - mx).exp(), (t.lo[i] - mx).exp());
        let s = a + b + c;
        pf[i] = p;
        pc[i] = b / s;
        po[i] = c / s;
    }
    (pf, pc, po)
}

/// Segmentation loss of the posterior grid of `(class_index, m)`.
pub fn loss_seg(
    params: &ParamView,
    base: &ModelSet,
    map: &FeatureMap,
    class_index: usize,
    m: usize,
    bbox: &BBox,
    delta: f64,
) -> Result<(f64, ParamView)> {
    let head = params.head(base);
    let sc = head.responses(map);
    let mut grad = params.zeros_like();
    let t = cell_terms(&head, &sc, class_index, m, true, true);
    let loss = seg_terms(&head, map, &t, class_index, m, bbox, delta, 1.0, Some(&mut grad));
    head.finish(&mut grad);
    Ok((loss, grad))
}

#[allow(clippy::too_many_arguments)]
fn seg_terms(
    head: &Head,
    map: &FeatureMap,
    t: &CellTerms,
    class_index: usize,
    m: usize,
    bbox: &BBox,
    delta: f64,
    w: f64,
    grad: Option<&mut ParamView>,
) -> f64 {
    let (pf, pc, po) = posterior_grid(t);
    let (loss, mut g) = mil_loss(&pf, map.height(), map.width(), bbox, delta);
    let Some(grad) = grad else {
        return loss;
    };
    g.iter_mut().for_each(|x| *x *= w);
    let dlf: Vec<f64> = (0..pf.len()).map(|i| g[i] * pf[i] * (1.0 - pf[i])).collect();
    let dlc: Vec<f64> = (0..pf.len()).map(|i| -g[i] * pf[i] * pc[i]).collect();
    let dlo: Vec<f64> = (0..pf.len()).map(|i| -g[i] * pf[i] * po[i]).collect();
    backprop(head, map, t, class_index, m, &dlf, &dlc, Some(&dlo), grad);
    loss
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub cls: f64,
    pub rep: f64,
    pub seg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub losses: LossRecord,
}

/// Mean losses over the training set, evaluated after each epoch; epoch 0
/// is the forward pass before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub epochs: Vec<EpochLoss>,
}

impl LossHistory {
    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.losses.total).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,L_cls,L_rep,L_seg,total\n");
        for e in &self.epochs {
            let l = e.losses;
            s.push_str(&format!("{},{},{},{},{}\n", e.epoch, l.cls, l.rep, l.seg, l.total));
        }
        s
    }
}

/// Loss and gradient of one image: classify (or take the true class), pick
/// the best mixture, segment, then combine the three terms.
pub fn image_objective(
    params: &ParamView,
    base: &ModelSet,
    example: &TrainingExample,
    cfg: &TrainConfig,
) -> Result<(LossRecord, ParamView)> {
    let head = params.head(base);
    let mut grad = params.zeros_like();
    let rec = objective(&head, example, cfg, Some(&mut grad))?;
    Ok((rec, grad))
}

/// Forward pass of [`image_objective`] without the gradient.
pub fn image_loss(params: &ParamView, base: &ModelSet, example: &TrainingExample, cfg: &TrainConfig) -> Result<LossRecord> {
    objective(&params.head(base), example, cfg, None)
}

fn objective(head: &Head, example: &TrainingExample, cfg: &TrainConfig, mut grad: Option<&mut ParamView>) -> Result<LossRecord> {
    let map = &example.map;
    let sc = head.responses(map);
    let (scores, best_m) = class_scores(head, &sc);
    let y = if cfg.use_gt_class {
        example.class_index
    } else {
        (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b })
    };
    let m = best_m[y];
    let t = cell_terms(head, &sc, y, m, true, grad.is_some());
    // Training scenes are unoccluded, so labels come from the two-way
    // ratio; this keeps the representation loss continuous.
    let z = t
        .lf
        .iter()
        .zip(&t.lc)
        .map(|(f, c)| if f > c { Label::Foreground } else { Label::Context })
        .collect();
    let z = LabelGrid::from_labels(map.height(), map.width(), z)?;

    let cls = cls_terms(head, &sc, map, &scores, &best_m, example.class_index, 1.0, grad.as_deref_mut());
    let (mut rep, mut seg) = (0.0, 0.0);
    if cfg.gamma1 != 0.0 {
        rep = rep_terms(head, map, &t, y, m, &z, cfg.gamma1, grad.as_deref_mut());
    }
    if cfg.gamma2 != 0.0 {
        seg = seg_terms(head, map, &t, y, m, &example.modal_box, cfg.delta, cfg.gamma2, grad.as_deref_mut());
    }
    if let Some(g) = grad {
        head.finish(g);
    }
    let total = cls + cfg.gamma1 * rep + cfg.gamma2 * seg;
    Ok(LossRecord { cls, rep, seg, total })
}

/// Momentum SGD state. Blocks (one class mixture) that have never seen a
/// gradient keep zero velocity and are skipped; the update is identical.
#[derive(Debug, Clone)]
pub struct Optimizer {
    velocity: ParamView,
    /// `[class][mixture]`: velocity may be non-zero.
    active: Vec<Vec<bool>>,
    pub lr: f64,
    pub mu_lr: f64,
    pub momentum: f64,
}

impl Optimizer {
    pub fn new(params: &ParamView, lr: f64, mu_lr: f64, momentum: f64) -> Self {
        Self {
            velocity: params.zeros_like(),
            active: params.fg.iter().map(|c| vec![false; c.len()]).collect(),
            lr,
            mu_lr,
            momentum,
        }
    }

    /// `v <- r v - lr g; p <- p + v`, then re-normalize the means.
    pub fn step(&mut self, params: &mut ParamView, grad: &ParamView) -> Result<()> {
        let (r, lr) = (self.momentum, self.lr);
        let update = |p: &mut [f64], v: &mut [f64], g: &[f64], lr: f64| {
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = r * *v - lr * g;
                *p += *v;
            }
        };
        for (ci, active) in self.active.iter_mut().enumerate() {
            for (m, on) in active.iter_mut().enumerate() {
                let touched = |g: &ParamView| g.fg[ci][m].iter().chain(&g.ctx[ci][m]).any(|x| *x != 0.0);
                if !*on && !touched(grad) {
                    continue;
                }
                *on = true;
                update(&mut params.fg[ci][m], &mut self.velocity.fg[ci][m], &grad.fg[ci][m], lr);
                update(&mut params.ctx[ci][m], &mut self.velocity.ctx[ci][m], &grad.ctx[ci][m], lr);
            }
        }
        if params.train_mu {
            for ((mu, v), g) in params.mu.iter_mut().zip(&mut self.velocity.mu).zip(&grad.mu) {
                update(mu, v, g, self.mu_lr);
                *mu = crate::tensor::normalize_with_tolerance(mu, crate::vmf::MEAN_NORM_TOLERANCE)?;
            }
        }
        Ok(())
    }

    /// Blocks whose parameters may have moved since construction.
    fn active(&self) -> &[Vec<bool>] {
        &self.active
    }
}

/// Non-finite, or grown by more than ten times the initial magnitude.
fn diverged(total: f64, initial: f64) -> bool {
    !total.is_finite() || total - initial > 10.0 * initial.abs()
}

/// Runs `cfg.epochs` epochs of per-image SGD. Image order is shuffled per
/// epoch from `cfg.seed`. `after_epoch` may re-refine priors.
pub fn train(
    examples: &[TrainingExample],
    models: &ModelSet,
    cfg: &TrainConfig,
    mut after_epoch: impl FnMut(usize, &mut ModelSet) -> Result<()>,
) -> Result<(ModelSet, ParamView, LossHistory)> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut base = models.clone();
    let mut params = ParamView::from_models(models, cfg.train_mu);
    let mut opt = Optimizer::new(&params, cfg.lr, cfg.mu_lr, cfg.momentum);
    let mean = |rs: &[LossRecord]| {
        let n = rs.len() as f64;
        LossRecord {
            cls: rs.iter().map(|r| r.cls).sum::<f64>() / n,
            rep: rs.iter().map(|r| r.rep).sum::<f64>() / n,
            seg: rs.iter().map(|r| r.seg).sum::<f64>() / n,
            total: rs.iter().map(|r| r.total).sum::<f64>() / n,
        }
    };
    let evaluate = |head: &Head| -> Result<LossRecord> {
        let rs: Vec<LossRecord> = examples
            .iter()
            .map(|e| objective(head, e, cfg, None))
            .collect::<Result<_>>()?;
        Ok(mean(&rs))
    };
    let initial = evaluate(&params.head(&base))?;
    let mut history = LossHistory {
        epochs: vec![EpochLoss {
            epoch: 0,
            losses: initial,
        }],
    };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = crate::math::rng(cfg.seed);
    let mut grad = params.zeros_like();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        // Buffers are reused across steps; the head stays in sync with
        // `params` and serves the end-of-epoch evaluation.
        let mut head = params.head(&base);
        for &i in &order {
            grad.clear(opt.active());
            objective(&head, &examples[i], cfg, Some(&mut grad))?;
            opt.step(&mut params, &grad)?;
            head.refresh(&params, opt.active());
        }
        let losses = evaluate(&head)?;
        drop(head);
        log::info!("epoch {epoch}: total {:.4}", losses.total);
        if diverged(losses.total, initial.total) {
            return Err(Error::Diverged {
                epoch,
                loss: losses.total,
                initial: initial.total,
            });
        }
        history.epochs.push(EpochLoss { epoch, losses });
        if cfg.refine_priors {
            let mut current = params.apply(&base)?;
            after_epoch(epoch, &mut current)?;
            base = current;
            params = ParamView {
                train_mu: params.train_mu,
                ..ParamView::from_models(&base, cfg.train_mu)
            };
        }
    }
    Ok((params.apply(&base)?, params, history))
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::config::RunConfig;
    use crate::math::rng;
    use crate::pipeline::{fit, Fixture};

    fn setup() -> (Fixture, ModelSet) {
        let cfg = RunConfig::small();
        let fx = Fixture::build(&cfg).unwrap();
        let (models, _, _) = fit(&fx.examples, &fx.class_ids, &fx.backgrounds, &cfg).unwrap();
        (fx, models)
    }

    fn random_point(base: &ModelSet, seed: u64) -> ParamView {
        let mut r = rng(seed);
        let mut p = ParamView::from_models(base, true);
        let v: Vec<f64> = p
            .flat()
            .into_iter()
            .map(|x| {
                let n: f64 = r.sample(StandardNormal);
                if x <= LOGIT_FLOOR { n - 3.0 } else { x + 0.5 * n }
            })
            .collect();
        p.set_flat(&v);
        p
    }

    /// Relative error between the analytic and the central-difference
    /// derivative along a random direction.
    fn directional_error(loss: impl Fn(&ParamView) -> (f64, ParamView), p: &ParamView, seed: u64) -> f64 {
        let (_, g) = loss(p);
        let mut r = rng(seed);
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

    #[test]
    fn classification_gradient() {
        let (fx, models) = setup();
        for s in 0..5 {
            let p = random_point(&models, s);
            let e = &fx.examples[s as usize * 3];
            let err = directional_error(|q| loss_cls(q, &models, &e.map, e.class_index).unwrap(), &p, 100 + s);
            assert!(err <= 1e-4, "point {s}: {err}");
        }
    }

    #[test]
    fn representation_gradient() {
        let (fx, models) = setup();
        for s in 0..5 {
            let p = random_point(&models, s);
            let e = &fx.examples[s as usize * 3];
            let z = &fx.gt_labels()[s as usize * 3];
            let err = directional_error(|q| loss_rep(q, &models, &e.map, e.class_index, 1, z).unwrap(), &p, 200 + s);
            assert!(err <= 1e-4, "point {s}: {err}");
        }
    }

    #[test]
    fn segmentation_gradient() {
        let (fx, models) = setup();
        for s in 0..5 {
            let p = random_point(&models, s);
            let e = &fx.examples[s as usize * 3];
            let err = directional_error(
                |q| loss_seg(q, &models, &e.map, e.class_index, 0, &e.modal_box, 0.05).unwrap(),
                &p,
                300 + s,
            );
            assert!(err <= 1e-4, "point {s}: {err}");
        }
    }

    #[test]
    fn mil_gradient_and_limits() {
        let bbox = BBox::from_cells(1..4, 2..5, crate::tensor::Frame::Representation).unwrap();
        let mut r = rng(5);
        let post: Vec<f64> = (0..36).map(|_| r.random_range(0.05..0.95)).collect();
        let (_, g) = mil_loss(&post, 6, 6, &bbox, 0.1);
        for i in 0..36 {
            let h = 1e-6;
            let mut a = post.clone();
            a[i] += h;
            let mut b = post.clone();
            b[i] -= h;
            let num = (mil_loss(&a, 6, 6, &bbox, 0.1).0 - mil_loss(&b, 6, 6, &bbox, 0.1).0) / (2.0 * h);
            assert!((num - g[i]).abs() <= 1e-5 * num.abs().max(1.0), "cell {i}: {num} vs {}", g[i]);
        }
        // a box-shaped posterior only pays the clamp and the border smoothness
        let ideal: Vec<f64> = (0..36)
            .map(|i| if (1..4).contains(&(i / 6)) && (2..5).contains(&(i % 6)) { 1.0 } else { 0.0 })
            .collect();
        let (l, _) = mil_loss(&ideal, 6, 6, &bbox, 0.0);
        assert!(l < 20.0 * 2e-6, "{l}");
        let flipped: Vec<f64> = ideal.iter().map(|p| 1.0 - p).collect();
        assert!(mil_loss(&flipped, 6, 6, &bbox, 0.0).0 > 10.0);
    }

    #[test]
    fn flat_round_trip_and_apply() {
        let (_, models) = setup();
        let p = ParamView::from_models(&models, true);
        let mut q = p.zeros_like();
        q.set_flat(&p.flat());
        assert_eq!(p, q);
        let back = p.apply(&models).unwrap();
        for (a, b) in back.classes.iter().zip(&models.classes) {
            for (x, y) in a.mixtures.iter().zip(&b.mixtures) {
                for (u, v) in x.fg.iter().zip(&y.fg) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
        let frozen = ParamView::from_models(&models, false);
        assert_eq!(frozen.flat().len() + models.kernels() * models.dictionary.means()[0].len(), p.flat().len());
    }

    #[test]
    fn momentum_step() {
        let (_, models) = setup();
        let mut p = ParamView::from_models(&models, false);
        let x0 = p.flat();
        let mut g = p.zeros_like();
        let ones = vec![1.0; x0.len()];
        g.set_flat(&ones);
        let mut opt = Optimizer::new(&p, 0.1, 0.0, 0.5);
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        // v1 = -0.1, v2 = 0.5 * v1 - 0.1
        for (a, b) in p.flat().iter().zip(&x0) {
            assert!((a - (b - 0.1 - 0.15)).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_rate_is_identity() {
        let (fx, models) = setup();
        let cfg = TrainConfig {
            lr: 0.0,
            mu_lr: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        };
        let (out, params, history) = train(&fx.examples, &models, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(params, ParamView::from_models(&models, true));
        assert_eq!(out.dictionary, models.dictionary);
        assert_eq!(history.epochs.len(), 3);
    }

    #[test]
    fn classifier_only_training() {
        let (fx, models) = setup();
        let cfg = TrainConfig {
            gamma1: 0.0,
            gamma2: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        };
        let (_, _, history) = train(&fx.examples, &models, &cfg, |_, _| Ok(())).unwrap();
        for e in &history.epochs {
            assert_eq!(e.losses.total, e.losses.cls);
            assert_eq!((e.losses.rep, e.losses.seg), (0.0, 0.0));
        }
        assert!(history.to_csv().starts_with("epoch,L_cls,L_rep,L_seg,total\n0,"));
    }

    #[test]
    fn invalid_rates_rejected() {
        for cfg in [
            TrainConfig { lr: -1.0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { delta: f64::NAN, ..TrainConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn divergence_guard() {
        assert!(diverged(f64::NAN, 1.0));
        assert!(diverged(f64::INFINITY, 1.0));
        assert!(diverged(12.0, 1.0));
        assert!(!diverged(10.0, 1.0));
        assert!(diverged(-100.0 + 1001.0, -100.0));
        assert!(!diverged(-5000.0, -10000.0));
    }
}
