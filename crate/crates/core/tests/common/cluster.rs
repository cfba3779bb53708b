use xstream_core::eval::{cluster_eval, hungarian};
use xstream_core::numerics::{Matrix, Rng};

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

pub fn perm_cost(cost: &Matrix, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(r, &c)| cost.get(r, c)).sum()
}

/// Compares the solver with exhaustive enumeration on random real and
/// integer (tied) cost matrices of size 1 to `max_n`.
pub fn check_hungarian(max_n: usize, trials: usize) -> Result<(), String> {
    let mut rng = Rng::new(11);
    for n in 1..=max_n {
        let all = permutations(n);
        for trial in 0..trials {
            let cost = if trial % 2 == 0 {
                rng.gaussian_matrix(n, n, 3.0)
            } else {
                let mut m = Matrix::zeros(n, n);
                m.data_mut().iter_mut().for_each(|v| *v = rng.below(4) as f64);
                m
            };
            let best = all.iter().map(|p| perm_cost(&cost, p)).fold(f64::INFINITY, f64::min);
            let perm = hungarian(&cost).map_err(|e| e.to_string())?;
            let mut seen = perm.clone();
            seen.sort_unstable();
            if seen != (0..n).collect::<Vec<_>>() {
                return Err(format!("n={n} trial={trial}: not a permutation"));
            }
            if (perm_cost(&cost, &perm) - best).abs() >= 1e-9 {
                return Err(format!("n={n} trial={trial}: cost {} vs optimum {best}", perm_cost(&cost, &perm)));
            }
        }
    }
    Ok(())
}

/// Brute-force cluster metrics straight from their definitions.
pub struct Brute {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub mean_entropy: f64,
    pub max_purity: f64,
}

pub fn brute(assign: &[usize], labels: &[usize], k: usize) -> Brute {
    let n = assign.len();
    let l = labels.iter().max().unwrap() + 1;
    let size = k.max(l);
    let acc = permutations(size)
        .iter()
        .map(|p| assign.iter().zip(labels).filter(|(&a, &y)| p[a] == y).count())
        .max()
        .unwrap() as f64
        / n as f64;

    let p = |pred: &dyn Fn(usize) -> bool| (0..n).filter(|&i| pred(i)).count() as f64 / n as f64;
    let mut mi = 0.0;
    let (mut hu, mut hv) = (0.0, 0.0);
    for a in 0..k {
        let pa = p(&|i| assign[i] == a);
        if pa > 0.0 {
            hu -= pa * pa.ln();
        }
        for y in 0..l {
            let py = p(&|i| labels[i] == y);
            let pj = p(&|i| assign[i] == a && labels[i] == y);
            if pj > 0.0 {
                mi += pj * (pj / (pa * py)).ln();
            }
        }
    }
    for y in 0..l {
        let py = p(&|i| labels[i] == y);
        if py > 0.0 {
            hv -= py * py.ln();
        }
    }
    let nmi = if hu == 0.0 && hv == 0.0 {
        1.0
    } else if hu == 0.0 || hv == 0.0 {
        0.0
    } else {
        mi / (hu * hv).sqrt()
    };

    // ARI from explicit pair enumeration.
    let (mut both, mut same_a, mut same_y, mut total) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let sa = assign[i] == assign[j];
            let sy = labels[i] == labels[j];
            both += (sa && sy) as u8 as f64;
            same_a += sa as u8 as f64;
            same_y += sy as u8 as f64;
            total += 1.0;
        }
    }
    let expected = same_a * same_y / total;
    let max = 0.5 * (same_a + same_y);
    let ari = if max == expected { 1.0 } else { (both - expected) / (max - expected) };

    let mut ents = Vec::new();
    let mut purities = Vec::new();
    for a in 0..k {
        let members: Vec<usize> = (0..n).filter(|&i| assign[i] == a).map(|i| labels[i]).collect();
        if members.is_empty() {
            continue;
        }
        let mut h = 0.0;
        let mut best = 0.0_f64;
        for y in 0..l {
            let f = members.iter().filter(|&&m| m == y).count() as f64 / members.len() as f64;
            if f > 0.0 {
                h -= f * f.ln();
            }
            best = best.max(f);
        }
        ents.push(h);
        purities.push(best);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Brute { acc, nmi, ari, mean_entropy: mean(&ents), max_purity: mean(&purities) }
}

pub fn compare_with_brute(assign: &[usize], labels: &[usize], k: usize) -> Result<(), String> {
    let r = cluster_eval(assign, labels, k).map_err(|e| e.to_string())?;
    let b = brute(assign, labels, k);
    for (name, got, want) in [
        ("acc", r.acc, b.acc),
        ("nmi", r.nmi, b.nmi),
        ("ari", r.ari, b.ari),
        ("entropy", r.mean_entropy, b.mean_entropy),
        ("purity", r.max_purity, b.max_purity),
    ] {
        if (got - want).abs() >= 1e-12 {
            return Err(format!("{name}: {got} vs {want}"));
        }
    }
    Ok(())
}

pub const TWELVE_ASSIGN: [usize; 12] = [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 0];
pub const TWELVE_LABELS: [usize; 12] = [0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 0];

/// Perfect and fully lumped clusterings against their closed forms.
pub fn check_closed_forms() -> Result<(), String> {
    let labels = [0, 0, 1, 1, 2, 2];
    let perfect = cluster_eval(&[2, 2, 0, 0, 1, 1], &labels, 3).map_err(|e| e.to_string())?;
    let lumped = cluster_eval(&[0; 6], &labels, 3).map_err(|e| e.to_string())?;
    let third = 1.0 / 3.0;
    for (name, got, want) in [
        ("perfect acc", perfect.acc, 1.0),
        ("perfect ari", perfect.ari, 1.0),
        ("perfect nmi", perfect.nmi, 1.0),
        ("perfect entropy", perfect.mean_entropy, 0.0),
        ("perfect purity", perfect.max_purity, 1.0),
        ("lumped nmi", lumped.nmi, 0.0),
        ("lumped ari", lumped.ari, 0.0),
        ("lumped entropy", lumped.mean_entropy, 3f64.ln()),
        ("lumped purity", lumped.max_purity, third),
        ("lumped acc", lumped.acc, third),
    ] {
        if (got - want).abs() >= 1e-15 {
            return Err(format!("{name}: {got} vs {want}"));
        }
    }
    Ok(())
}
