//! Naive reimplementations of the text metrics for equivalence checks.
//! Everything is done by scanning lists; no hashing.

type Toks = Vec<String>;

fn grams(t: &[String], n: usize) -> Vec<Toks> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

fn count(list: &[Toks], g: &Toks) -> usize {
    list.iter().filter(|x| *x == g).count()
}

fn distinct(list: &[Toks]) -> Vec<Toks> {
    let mut out: Vec<Toks> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

fn bleu_counts(c: &[String], refs: &[Toks], n: usize) -> (usize, usize) {
    let cg = grams(c, n);
    let mut m = 0;
    for g in distinct(&cg) {
        let best_ref = refs.iter().map(|r| count(&grams(r, n), &g)).max().unwrap_or(0);
        m += count(&cg, &g).min(best_ref);
    }
    (m, cg.len())
}

fn closest(c: usize, refs: &[Toks]) -> usize {
    let mut best = refs[0].len();
    for r in refs {
        let d = (r.len() as i64 - c as i64).abs();
        let bd = (best as i64 - c as i64).abs();
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    best
}

pub fn bleu(c: &[String], refs: &[Toks]) -> f64 {
    let mut logs = 0.0;
    for n in 1..=4 {
        let (m, t) = bleu_counts(c, refs, n);
        let p = if m > 0 {
            m as f64 / t as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (t as f64 + 1.0)
        };
        logs += p.ln() / 4.0;
    }
    let r = closest(c.len(), refs) as f64;
    let cl = c.len() as f64;
    let bp = if cl > r { 1.0 } else { (1.0 - r / cl).exp() };
    bp * logs.exp()
}

fn is_subsequence(s: &[&String], r: &[String]) -> bool {
    let mut it = r.iter();
    s.iter().all(|x| it.any(|y| y == *x))
}

/// LCS length by trying every subsequence of the candidate.
fn lcs(c: &[String], r: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << c.len()) {
        let sub: Vec<&String> = (0..c.len()).filter(|i| mask & (1 << i) != 0).map(|i| &c[i]).collect();
        if sub.len() > best && is_subsequence(&sub, r) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge(c: &[String], refs: &[Toks]) -> f64 {
    let mut best = 0.0f64;
    for r in refs {
        let l = lcs(c, r) as f64;
        if l > 0.0 {
            let p = l / c.len() as f64;
            let rec = l / r.len() as f64;
            best = best.max(2.0 * p * rec / (p + rec));
        }
    }
    best
}

fn stem(w: &str) -> String {
    let rules = [("ies", "y"), ("ing", ""), ("edly", ""), ("ed", ""), ("ly", ""), ("es", ""), ("s", "")];
    for (suf, rep) in rules {
        if let Some(base) = w.strip_suffix(suf) {
            if base.chars().count() >= 3 {
                return base.to_string() + rep;
            }
        }
    }
    w.to_string()
}

fn meteor_one(c: &[String], r: &[String]) -> f64 {
    let mut ref_taken = vec![false; r.len()];
    let mut cand_ref: Vec<Option<usize>> = vec![None; c.len()];
    let keys: [fn(&str) -> String; 2] = [|w| w.to_string(), |w| stem(w)];
    for key in keys {
        for i in 0..c.len() {
            if cand_ref[i].is_some() {
                continue;
            }
            if let Some(j) = (0..r.len()).find(|&j| !ref_taken[j] && key(&r[j]) == key(&c[i])) {
                ref_taken[j] = true;
                cand_ref[i] = Some(j);
            }
        }
    }
    let matched: Vec<(usize, usize)> = cand_ref.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j))).collect();
    let m = matched.len();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    for (k, &(i, j)) in matched.iter().enumerate() {
        let continues = k > 0 && matched[k - 1] == (i.wrapping_sub(1), j.wrapping_sub(1));
        if !continues {
            chunks += 1;
        }
    }
    let p = m as f64 / c.len() as f64;
    let rc = m as f64 / r.len() as f64;
    let f = 10.0 * p * rc / (rc + 9.0 * p);
    f * (1.0 - 0.5 * (chunks as f64 / m as f64).powi(3))
}

pub fn meteor(c: &[String], refs: &[Toks]) -> f64 {
    refs.iter().map(|r| meteor_one(c, r)).fold(0.0, f64::max)
}

/// Per-sample plain CIDEr over the corpus.
pub fn cider(corpus: &[(Toks, Vec<Toks>)]) -> Vec<f64> {
    let n_docs = corpus.len() as f64;
    let mut scores = vec![0.0; corpus.len()];
    for n in 1..=4 {
        let doc_freq = |g: &Toks| -> f64 {
            let df = corpus.iter().filter(|(_, refs)| refs.iter().any(|r| grams(r, n).contains(g))).count();
            df.max(1) as f64
        };
        let vector = |t: &[String]| -> Vec<(Toks, f64)> {
            let all = grams(t, n);
            distinct(&all)
                .into_iter()
                .map(|g| {
                    let w = count(&all, &g) as f64 * (n_docs / doc_freq(&g)).ln();
                    (g, w)
                })
                .collect()
        };
        let cos = |a: &[(Toks, f64)], b: &[(Toks, f64)]| -> f64 {
            let mut dot = 0.0;
            for (g, x) in a {
                for (h, y) in b {
                    if g == h {
                        dot += x * y;
                    }
                }
            }
            let na = a.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|(_, y)| y * y).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                dot / (na * nb)
            }
        };
        for (k, (c, refs)) in corpus.iter().enumerate() {
            let vc = vector(c);
            let mean: f64 = refs.iter().map(|r| cos(&vc, &vector(r))).sum::<f64>() / refs.len() as f64;
            scores[k] += 10.0 * mean / 4.0;
        }
    }
    scores
}
