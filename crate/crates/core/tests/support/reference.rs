//! Plain f64 forward pass of the full model, used as a finite-difference
//! oracle. Shares no code with the tape.

use std::collections::BTreeMap;

use feedsynth::data::PAD_ID;
use feedsynth::model::{Ablation, Model, ModelConfig};
use feedsynth::region::RegionFeatureSet;
use feedsynth::training::Example;

#[derive(Clone, Debug)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl M {
    fn zeros(r: usize, c: usize) -> M {
        M { r, c, d: vec![0.0; r * c] }
    }
    fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }
    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.d[i * self.c + j] = v;
    }
    fn mm(&self, o: &M) -> M {
        assert_eq!(self.c, o.r);
        let mut out = M::zeros(self.r, o.c);
        for i in 0..self.r {
            for j in 0..o.c {
                let mut s = 0.0;
                for k in 0..self.c {
                    s += self.at(i, k) * o.at(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }
    fn plus(&self, o: &M) -> M {
        M { r: self.r, c: self.c, d: self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect() }
    }
    fn plus_row(&self, b: &M) -> M {
        let mut out = self.clone();
        for i in 0..self.r {
            for j in 0..self.c {
                out.d[i * self.c + j] += b.d[j];
            }
        }
        out
    }
}

pub struct Reference {
    pub cfg: ModelConfig,
    pub params: BTreeMap<String, M>,
}

impl Reference {
    pub fn from_model(model: &Model) -> Self {
        let params = model
            .params
            .iter()
            .map(|(name, t)| {
                let shape = t.shape();
                let (r, c) = if shape.len() == 2 { (shape[0], shape[1]) } else { (1, shape[0]) };
                (name.to_string(), M { r, c, d: t.data().iter().map(|&v| v as f64).collect() })
            })
            .collect();
        Reference { cfg: model.config.clone(), params }
    }

    fn p(&self, name: &str) -> &M {
        self.params.get(name).unwrap_or_else(|| panic!("missing {name}"))
    }

    fn embed(&self, ids: &[usize]) -> M {
        let d = self.cfg.d_model;
        let table = self.p("embed.token");
        let mut out = M::zeros(ids.len(), d);
        for (pos, &id) in ids.iter().enumerate() {
            for i in 0..d {
                let pair = (i / 2 * 2) as f64;
                let angle = pos as f64 / 10000f64.powf(pair / d as f64);
                let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                out.set(pos, i, table.at(id, i) + pe);
            }
        }
        out
    }

    /// `allowed(i, j)`: may query i attend to key j.
    fn mha(&self, prefix: &str, xq: &M, xkv: &M, allowed: &dyn Fn(usize, usize) -> bool) -> M {
        let q = xq.mm(self.p(&format!("{prefix}.wq")));
        let k = xkv.mm(self.p(&format!("{prefix}.wk")));
        let v = xkv.mm(self.p(&format!("{prefix}.wv")));
        let h = self.cfg.n_heads;
        let dk = self.cfg.d_model / h;
        let mut concat = M::zeros(xq.r, self.cfg.d_model);
        for head in 0..h {
            let cols = head * dk..(head + 1) * dk;
            for i in 0..xq.r {
                let mut scores = vec![f64::NEG_INFINITY; xkv.r];
                for (j, s) in scores.iter_mut().enumerate() {
                    if allowed(i, j) {
                        *s = cols.clone().map(|c| q.at(i, c) * k.at(j, c)).sum::<f64>() / (dk as f64).sqrt();
                    }
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|&s| if s.is_finite() { (s - max).exp() } else { 0.0 }).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    let val: f64 = (0..xkv.r).map(|j| e[j] / z * v.at(j, c)).sum();
                    concat.set(i, c, val);
                }
            }
        }
        concat.mm(self.p(&format!("{prefix}.wo")))
    }

    fn ln(&self, prefix: &str, x: &M) -> M {
        let g = self.p(&format!("{prefix}.gain"));
        let b = self.p(&format!("{prefix}.bias"));
        let mut out = x.clone();
        for i in 0..x.r {
            let row = &x.d[i * x.c..(i + 1) * x.c];
            let mean = row.iter().sum::<f64>() / x.c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.c as f64;
            for j in 0..x.c {
                out.set(i, j, (row[j] - mean) / (var + 1e-5).sqrt() * g.d[j] + b.d[j]);
            }
        }
        out
    }

    fn ffn(&self, prefix: &str, x: &M) -> M {
        let mut h = x.mm(self.p(&format!("{prefix}.w1"))).plus_row(self.p(&format!("{prefix}.b1")));
        h.d.iter_mut().for_each(|v| *v = v.max(0.0));
        h.mm(self.p(&format!("{prefix}.w2"))).plus_row(self.p(&format!("{prefix}.b2")))
    }

    fn visual(&self, rfs: &RegionFeatureSet) -> M {
        let dv = self.cfg.d_visual;
        let n = rfs.n_regions();
        let g = match rfs.global() {
            Some(g) => M { r: 1, c: dv, d: g.iter().map(|&v| v as f64).collect() },
            None => {
                let mut g = M::zeros(1, dv);
                for f in rfs.features() {
                    for (j, &v) in f.iter().enumerate() {
                        g.d[j] += v as f64 / n as f64;
                    }
                }
                g
            }
        };
        assert_eq!(self.cfg.ablation, Ablation::TVAR, "reference covers TVAR only");
        let w = rfs.boxes().iter().map(|b| b.x2).fold(0.0f32, f32::max) as f64;
        let h = rfs.boxes().iter().map(|b| b.y2).fold(0.0f32, f32::max) as f64;
        let feats = M { r: n, c: dv, d: rfs.features().iter().flatten().map(|&v| v as f64).collect() };
        let geo = M {
            r: n,
            c: 4,
            d: rfs
                .boxes()
                .iter()
                .flat_map(|b| [b.x1 as f64 / w, b.y1 as f64 / h, b.x2 as f64 / w, b.y2 as f64 / h])
                .collect(),
        };
        let proj = self.p("visual.proj");
        let bmat = feats.mm(proj).plus(&geo.mm(self.p("visual.box")));
        let gp = g.mm(proj);
        let scores: Vec<f64> = (0..n).map(|i| (0..dv).map(|j| bmat.at(i, j) * gp.d[j]).sum()).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut out = M::zeros(1, dv);
        for i in 0..n {
            for j in 0..dv {
                out.d[j] += e[i] / z * bmat.at(i, j);
            }
        }
        out
    }

    fn example_loss(&self, ex: &Example, rfs: &RegionFeatureSet) -> f64 {
        let src_pad: Vec<bool> = ex.src.iter().map(|&t| t == PAD_ID).collect();
        let mut x = self.embed(&ex.src);
        for l in 0..self.cfg.n_layers_enc {
            let a = self.mha(&format!("enc.{l}.self"), &x, &x, &|_, j| !src_pad[j]);
            x = self.ln(&format!("enc.{l}.ln_self"), &x.plus(&a));
            let f = self.ffn(&format!("enc.{l}.ffn"), &x);
            x = self.ln(&format!("enc.{l}.ln_ffn"), &x.plus(&f));
        }
        let z = x;
        let gstar = self.visual(rfs);
        let mut cat = M::zeros(z.r, z.c + gstar.c);
        for i in 0..z.r {
            for j in 0..z.c {
                cat.set(i, j, z.at(i, j));
            }
            for j in 0..gstar.c {
                cat.set(i, z.c + j, gstar.d[j]);
            }
        }
        let y = cat.mm(self.p("fuse.w")).plus_row(self.p("fuse.b"));

        let n = ex.target.len();
        let input = &ex.target[..n - 1];
        let labels = &ex.target[1..];
        let tgt_pad: Vec<bool> = input.iter().map(|&t| t == PAD_ID).collect();
        let mut x = self.embed(input);
        for l in 0..self.cfg.n_layers_dec {
            let a = self.mha(&format!("dec.{l}.self"), &x, &x, &|i, j| j <= i && !tgt_pad[j]);
            x = self.ln(&format!("dec.{l}.ln_self"), &x.plus(&a));
            let c = self.mha(&format!("dec.{l}.cross"), &x, &z, &|_, j| !src_pad[j]);
            x = self.ln(&format!("dec.{l}.ln_cross"), &x.plus(&c));
            let m = self.mha(&format!("dec.{l}.mm"), &x, &y, &|_, j| !src_pad[j]);
            x = self.ln(&format!("dec.{l}.ln_mm"), &x.plus(&m));
            let f = self.ffn(&format!("dec.{l}.ffn"), &x);
            x = self.ln(&format!("dec.{l}.ln_ffn"), &x.plus(&f));
        }
        let logits = x.mm(self.p("out.w")).plus_row(self.p("out.b"));
        let mut total = 0.0;
        let mut count = 0;
        for (i, &t) in labels.iter().enumerate() {
            if t == PAD_ID {
                continue;
            }
            let row = &logits.d[i * logits.c..(i + 1) * logits.c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
        }
        total / count as f64
    }

    pub fn loss(&self, batch: &[Example], regions: &BTreeMap<String, RegionFeatureSet>) -> f64 {
        batch
            .iter()
            .map(|ex| self.example_loss(ex, &regions[&ex.image_ref]))
            .sum::<f64>()
            / batch.len() as f64
    }
}
