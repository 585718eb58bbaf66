//! Independent oracles shared by the acceptance run and the focused tests.
#![allow(dead_code)]

use paradiff::denoiser::{DenoiserConfig, DenoiserModel};
use paradiff::rng::{randn, seeded};
use paradiff::schedule::NoiseSchedule;
use paradiff::tensor::{Graph, Mat, Var};
use rand::Rng;
use rand_distr::StandardNormal;

/// Structural checks on a schedule's tables. Returns the first violation.
pub fn schedule_invariants(s: &NoiseSchedule) -> Result<(), String> {
    let t = s.steps();
    if s.betas().len() != t || s.alpha_bars().len() != t + 1 {
        return Err("table lengths".into());
    }
    if s.alpha_bar(0) != 1.0 {
        return Err("alpha_bar(0) != 1".into());
    }
    let mut prod = 1.0f64;
    for i in 1..=t {
        let b = s.beta(i);
        if !(b > 0.0 && b < 1.0) {
            return Err(format!("beta_{i} = {b} outside (0, 1)"));
        }
        prod *= 1.0 - b;
        let ab = s.alpha_bar(i);
        if (ab - prod).abs() > 1e-12 * prod.max(1e-300) + 1e-300 {
            return Err(format!("alpha_bar_{i} = {ab} but product = {prod}"));
        }
        if !(ab > 0.0 && ab < s.alpha_bar(i - 1)) {
            return Err(format!("alpha_bar not strictly decreasing in (0, 1] at {i}"));
        }
        if (s.sigma(i) - b.sqrt()).abs() > 1e-15 {
            return Err(format!("sigma_{i} != sqrt(beta_{i})"));
        }
    }
    Ok(())
}

/// Iterates the one-step kernel `z_t = sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) eps`
/// from `x0` over `n` scalar chains, returning, for each step in `checks`,
/// the mean error in standard errors and the relative variance error
/// against the closed form `N(sqrt(abar_t) x0, 1 - abar_t)`.
pub fn forward_mc(s: &NoiseSchedule, x0: f64, n: usize, seed: u64, checks: &[usize]) -> Vec<(usize, f64, f64)> {
    let mut rng = seeded(seed);
    let mut z = vec![x0; n];
    let mut out = Vec::new();
    for t in 1..=s.steps() {
        let a = (1.0 - s.beta(t)).sqrt();
        let b = s.beta(t).sqrt();
        for v in z.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v = a * *v + b * e;
        }
        if checks.contains(&t) {
            let mean = z.iter().sum::<f64>() / n as f64;
            let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            let want_mean = s.alpha_bar(t).sqrt() * x0;
            let want_var = 1.0 - s.alpha_bar(t);
            let se = (want_var / n as f64).sqrt();
            out.push((t, (mean - want_mean).abs() / se, (var - want_var).abs() / want_var));
        }
    }
    out
}

pub fn gradcheck_config() -> DenoiserConfig {
    DenoiserConfig { layers: 2, heads: 2, width: 8, max_len: 6, rel_buckets: 8, ..Default::default() }
}

/// Which block a denoiser parameter belongs to, for grouped reporting.
pub fn block_of(name: &str) -> String {
    let mut parts = name.split('.');
    let head = parts.next().unwrap_or("");
    if head.starts_with("block") {
        let sub = parts.next().unwrap_or("");
        let group = match sub {
            "norm_self" | "self_attn" => "self_attn",
            "norm_cross" | "cross_attn" => "cross_attn",
            "ada_scale" | "ada_shift" => "adaln",
            other => other,
        };
        format!("{head}.{group}")
    } else {
        head.to_string()
    }
}

/// Source-conditioned plus null-conditioned reconstruction error.
fn gradcheck_loss<'p>(m: &'p DenoiserModel, g: &mut Graph<'p>, z: &Mat, c: &Mat, target: &Mat, t: usize) -> Var {
    let zv = g.constant(z.clone());
    let cv = g.constant(c.clone());
    let a = m.net().forward(g, m.params(), zv, Some(cv), t);
    let zv2 = g.constant(z.clone());
    let b = m.net().forward(g, m.params(), zv2, None, t);
    let la = g.mse(a, target.clone());
    let lb = g.mse(b, target.clone());
    g.add(la, lb)
}

/// Central finite differences against reverse-mode gradients, over every
/// scalar of the model. The loss exercises both the source and null
/// conditioning paths. Returns `(block, ||g - g_fd|| / (||g|| + ||g_fd||))`.
pub fn denoiser_gradcheck(seed: u64) -> Vec<(String, f64)> {
    let mut rng = seeded(seed);
    let cfg = gradcheck_config();
    let mut model = DenoiserModel::init(cfg.clone(), &mut rng).unwrap();
    let z = randn(&mut rng, cfg.max_len, cfg.width);
    let c = randn(&mut rng, cfg.max_len, cfg.width);
    let target = randn(&mut rng, cfg.max_len, cfg.width);
    let t = 37;

    let value = |m: &DenoiserModel| {
        let mut g = Graph::inference();
        let l = gradcheck_loss(m, &mut g, &z, &c, &target, t);
        g.scalar(l)
    };
    let analytic = {
        let mut g = Graph::new(&[model.params().tag()]);
        let l = gradcheck_loss(&model, &mut g, &z, &c, &target, t);
        g.backward(l, model.params())
    };

    let h = 1e-5;
    let ids: Vec<_> = model.params().iter().map(|(id, name, m)| (id, name.to_string(), m.dim())).collect();
    let mut groups: Vec<(String, f64, f64, f64)> = Vec::new();
    for (id, name, (r, cc)) in ids {
        let grad: Mat = analytic.get(id).cloned().unwrap_or_else(|| Mat::zeros((r, cc)));
        let block = block_of(&name);
        let idx = match groups.iter().position(|g| g.0 == block) {
            Some(i) => i,
            None => {
                groups.push((block, 0.0, 0.0, 0.0));
                groups.len() - 1
            }
        };
        for i in 0..r {
            for j in 0..cc {
                let orig = model.params().get(id)[[i, j]];
                model.params_mut().get_mut(id)[[i, j]] = orig + h;
                let up = value(&model);
                model.params_mut().get_mut(id)[[i, j]] = orig - h;
                let down = value(&model);
                model.params_mut().get_mut(id)[[i, j]] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = grad[[i, j]];
                groups[idx].1 += (a - fd) * (a - fd);
                groups[idx].2 += a * a;
                groups[idx].3 += fd * fd;
            }
        }
    }
    groups.into_iter().map(|(b, diff, a, f)| (b, diff.sqrt() / (a.sqrt() + f.sqrt()).max(1e-300))).collect()
}

/// A from-scratch sentence and corpus BLEU: explicit n-gram lists, linear
/// scans, add-one above unigrams, standard brevity penalty.
pub fn oracle_bleu(pairs: &[(&str, &str)]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (hyp, reference) in pairs {
        let h: Vec<&str> = hyp.split(' ').filter(|w| !w.is_empty()).collect();
        let rf: Vec<&str> = reference.split(' ').filter(|w| !w.is_empty()).collect();
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            let mut pool: Vec<Vec<&str>> = if rf.len() >= n { (0..=rf.len() - n).map(|i| rf[i..i + n].to_vec()).collect() } else { vec![] };
            for i in 0..=h.len() - n {
                total[n - 1] += 1;
                let g = h[i..i + n].to_vec();
                if let Some(p) = pool.iter().position(|x| *x == g) {
                    pool.remove(p);
                    matched[n - 1] += 1;
                }
            }
        }
    }
    if matched[0] == 0 {
        return 0.0;
    }
    let mut prod = matched[0] as f64 / total[0] as f64;
    for n in 1..4 {
        prod *= (matched[n] + 1) as f64 / (total[n] + 1) as f64;
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * prod.powf(0.25)
}

/// Fixed pairs with values worked out by hand (see the counts in the comments).
pub fn hand_bleu_cases() -> Vec<(&'static str, &'static str, f64)> {
    vec![
        // p = 3/3, 3/3, 2/2, 1/1 after add-one; c = 3, r = 4.
        ("the cat sat", "the cat sat down", 100.0 * (-1.0f64 / 3.0).exp()),
        // p1 = 6/7 (three "the" clipped to two), p2 = 5/7, p3 = 4/6, p4 = 3/5; c = r = 7.
        ("the the cat sat on the mat", "the cat sat on the red mat", 100.0 * (180.0f64 / 735.0).powf(0.25)),
        // p1 = 4/5, p2 = 3/5, p3 = 1/4, p4 = 1/3; c = 5, r = 8.
        ("a b c d e", "x a b y d e z w", 100.0 * (-0.6f64).exp() * 0.04f64.powf(0.25)),
    ]
}

/// The three hand cases pooled into one corpus: p = 13/15, 9/13, 5/10, 3/7; c = 15, r = 19.
pub fn hand_corpus_bleu() -> f64 {
    100.0 * (-4.0f64 / 15.0).exp() * (9.0f64 / 70.0).powf(0.25)
}
