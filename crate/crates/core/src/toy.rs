//! A small deterministic masked denoiser used as a calibration and evaluation
//! target.
//!
//! Tokens are embedded into `d_model` columns, passed through residual
//! per-token MLP blocks (`h += down(relu(up(h)))`) and projected back to
//! vocabulary logits. There is no attention; positional embeddings are off by
//! default.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mcs::MaskedSequence;
use crate::tensor::{read_matrix, write_matrix, DenseMatrix, Rng};

const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyModelSpec {
    pub vocab: u32,
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_blocks: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub positional: bool,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        Self {
            vocab: 64,
            d_model: 32,
            d_hidden: 64,
            n_blocks: 2,
            seq_len: 64,
            seed: 0,
            positional: false,
        }
    }
}

impl ToyModelSpec {
    /// The last vocabulary entry is reserved as the mask token.
    pub fn mask_id(&self) -> u32 {
        self.vocab - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.d_model == 0 || self.d_hidden == 0 || self.seq_len == 0 {
            return Err(Error::Config(format!("invalid toy model spec {self:?}")));
        }
        Ok(())
    }
}

/// Input operand of one linear layer, one column per token.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub layer: String,
    pub inputs: DenseMatrix,
}

#[derive(Debug, Clone)]
struct Block {
    up: DenseMatrix,
    down: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    spec: ToyModelSpec,
    embed: DenseMatrix,
    pos: Option<DenseMatrix>,
    blocks: Vec<Block>,
    head: DenseMatrix,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `vocab x L` logits.
    pub logits: DenseMatrix,
    pub records: Vec<ActivationRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct DivergenceReport {
    pub mean_sq_logit_error: f64,
    pub mean_kl: f64,
}

fn relu(m: &mut DenseMatrix) {
    for v in m.data_mut() {
        *v = v.max(0.0);
    }
}

impl ToyModel {
    pub fn init(spec: ToyModelSpec) -> Result<Self> {
        spec.validate()?;
        let rng = Rng::new(spec.seed, 0);
        let mut stream = 0u64;
        let mut draw = |rows: usize, cols: usize, fan_in: usize| {
            let mut r = rng.fork(stream);
            stream += 1;
            DenseMatrix::gaussian(rows, cols, 1.0 / (fan_in as f32).sqrt(), &mut r)
        };
        let vocab = spec.vocab as usize;
        let embed = draw(vocab, spec.d_model, 1);
        let pos = spec.positional.then(|| draw(spec.seq_len, spec.d_model, 1));
        let blocks = (0..spec.n_blocks)
            .map(|_| Block {
                up: draw(spec.d_hidden, spec.d_model, spec.d_model),
                down: draw(spec.d_model, spec.d_hidden, spec.d_hidden),
            })
            .collect();
        let head = draw(vocab, spec.d_model, spec.d_model);
        Ok(Self {
            spec,
            embed,
            pos,
            blocks,
            head,
        })
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    /// Names of the block linears, the default quantization targets.
    pub fn quantizable_names(&self) -> Vec<String> {
        (0..self.blocks.len())
            .flat_map(|b| [format!("block{b}.up"), format!("block{b}.down")])
            .collect()
    }

    /// Every linear layer: block linears followed by the output head.
    pub fn linear_names(&self) -> Vec<String> {
        let mut names = self.quantizable_names();
        names.push("head".into());
        names
    }

    fn all_names(&self) -> Vec<String> {
        let mut names = vec!["embed".to_string()];
        if self.pos.is_some() {
            names.push("pos".into());
        }
        names.extend(self.linear_names());
        names
    }

    pub fn layer(&self, name: &str) -> Option<&DenseMatrix> {
        self.slot(name)
    }

    fn slot(&self, name: &str) -> Option<&DenseMatrix> {
        match name {
            "embed" => Some(&self.embed),
            "pos" => self.pos.as_ref(),
            "head" => Some(&self.head),
            _ => {
                let (b, which) = parse_block_name(name)?;
                let block = self.blocks.get(b)?;
                Some(if which == "up" { &block.up } else { &block.down })
            }
        }
    }

    fn slot_mut(&mut self, name: &str) -> Option<&mut DenseMatrix> {
        match name {
            "embed" => Some(&mut self.embed),
            "pos" => self.pos.as_mut(),
            "head" => Some(&mut self.head),
            _ => {
                let (b, which) = parse_block_name(name)?;
                let block = self.blocks.get_mut(b)?;
                Some(if which == "up" { &mut block.up } else { &mut block.down })
            }
        }
    }

    /// Copy of the model with the named linear weights replaced.
    pub fn with_layers(&self, replacements: &BTreeMap<String, DenseMatrix>) -> Result<ToyModel> {
        let mut out = self.clone();
        for (name, w) in replacements {
            let slot = out
                .slot_mut(name)
                .ok_or_else(|| Error::shape(format!("unknown layer {name}")))?;
            if slot.shape() != w.shape() {
                return Err(Error::shape(format!(
                    "layer {name}: expected {:?}, got {:?}",
                    slot.shape(),
                    w.shape()
                )));
            }
            *slot = w.clone();
        }
        Ok(out)
    }

    pub fn forward(&self, ids: &[u32], capture: bool) -> Result<ForwardOutput> {
        let len = ids.len();
        if len > self.spec.seq_len {
            return Err(Error::shape(format!(
                "sequence length {len} exceeds {}",
                self.spec.seq_len
            )));
        }
        let d = self.spec.d_model;
        let mut h = DenseMatrix::zeros(d, len);
        for (p, &tok) in ids.iter().enumerate() {
            if tok >= self.spec.vocab {
                return Err(Error::invalid(format!(
                    "token {tok} outside vocabulary of {}",
                    self.spec.vocab
                )));
            }
            let e = self.embed.row(tok as usize);
            for k in 0..d {
                let mut v = e[k];
                if let Some(pos) = &self.pos {
                    v += pos.get(p, k);
                }
                h.set(k, p, v);
            }
        }

        let mut records = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            let mut a = block.up.matmul(&h)?;
            relu(&mut a);
            let delta = block.down.matmul(&a)?;
            if capture {
                records.push(ActivationRecord {
                    layer: format!("block{b}.up"),
                    inputs: h.clone(),
                });
                records.push(ActivationRecord {
                    layer: format!("block{b}.down"),
                    inputs: a,
                });
            }
            for (hv, dv) in h.data_mut().iter_mut().zip(delta.data()) {
                *hv += dv;
            }
        }
        let logits = self.head.matmul(&h)?;
        if capture {
            records.push(ActivationRecord {
                layer: "head".into(),
                inputs: h,
            });
        }
        Ok(ForwardOutput { logits, records })
    }

    pub fn forward_masked(&self, seq: &MaskedSequence, capture: bool) -> Result<ForwardOutput> {
        self.forward(&seq.ids, capture)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let s = &self.spec;
        let mut manifest = format!(
            "spec vocab={} d_model={} d_hidden={} n_blocks={} seq_len={} seed={} positional={}\n",
            s.vocab, s.d_model, s.d_hidden, s.n_blocks, s.seq_len, s.seed, s.positional as u8
        );
        for name in self.all_names() {
            let file = format!("{name}.qdt");
            write_matrix(dir.join(&file), self.slot(&name).expect("known layer"))?;
            manifest.push_str(&format!("{name} {file}\n"));
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let spec = parse_spec_line(lines.next().unwrap_or_default())?;
        let mut model = ToyModel::init(spec)?;
        let mut seen = 0;
        for line in lines {
            let (name, file) = line
                .split_once(' ')
                .ok_or_else(|| Error::Config(format!("bad manifest line {line:?}")))?;
            let w = read_matrix(dir.join(file.trim()))?;
            let slot = model
                .slot_mut(name)
                .ok_or_else(|| Error::Config(format!("unknown layer {name} in manifest")))?;
            if slot.shape() != w.shape() {
                return Err(Error::shape(format!(
                    "layer {name}: manifest spec expects {:?}, file has {:?}",
                    slot.shape(),
                    w.shape()
                )));
            }
            *slot = w;
            seen += 1;
        }
        if seen != model.all_names().len() {
            return Err(Error::Config(format!(
                "manifest lists {seen} layers, model has {}",
                model.all_names().len()
            )));
        }
        Ok(model)
    }
}

fn parse_block_name(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("block")?;
    let (idx, which) = rest.split_once('.')?;
    if which != "up" && which != "down" {
        return None;
    }
    Some((idx.parse().ok()?, which))
}

fn parse_spec_line(line: &str) -> Result<ToyModelSpec> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("spec") {
        return Err(Error::Config("manifest must start with a spec line".into()));
    }
    let mut spec = ToyModelSpec::default();
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad spec entry {kv:?}")))?;
        let bad = |_| Error::Config(format!("bad value for {k}: {v:?}"));
        match k {
            "vocab" => spec.vocab = v.parse().map_err(bad)?,
            "d_model" => spec.d_model = v.parse().map_err(bad)?,
            "d_hidden" => spec.d_hidden = v.parse().map_err(bad)?,
            "n_blocks" => spec.n_blocks = v.parse().map_err(bad)?,
            "seq_len" => spec.seq_len = v.parse().map_err(bad)?,
            "seed" => spec.seed = v.parse().map_err(bad)?,
            "positional" => spec.positional = v.parse::<u8>().map_err(bad)? != 0,
            _ => return Err(Error::Config(format!("unknown spec key {k}"))),
        }
    }
    Ok(spec)
}

fn log_softmax(col: &[f64]) -> Vec<f64> {
    let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    col.iter().map(|v| v - lse).collect()
}

/// Logit MSE and mean per-position `KL(p_fp || p_quant)` over `eval_set`.
pub fn eval_divergence(
    model: &ToyModel,
    quantized: &BTreeMap<String, DenseMatrix>,
    eval_set: &[MaskedSequence],
) -> Result<DivergenceReport> {
    let qmodel = model.with_layers(quantized)?;
    let per_seq: Vec<(f64, f64, usize, usize)> = eval_set
        .par_iter()
        .map(|seq| {
            let a = model.forward(&seq.ids, false)?.logits;
            let b = qmodel.forward(&seq.ids, false)?.logits;
            let sq: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| ((x - y) as f64).powi(2))
                .sum();
            let mut kl = 0.0;
            for p in 0..a.cols() {
                let la = log_softmax(&a.column(p).iter().map(|&v| v as f64).collect::<Vec<_>>());
                let lb = log_softmax(&b.column(p).iter().map(|&v| v as f64).collect::<Vec<_>>());
                kl += la
                    .iter()
                    .zip(&lb)
                    .map(|(x, y)| x.exp() * (x - y))
                    .sum::<f64>()
                    .max(0.0);
            }
            Ok((sq, kl, a.data().len(), a.cols()))
        })
        .collect::<Result<_>>()?;
    let (mut sq, mut kl, mut n_logits, mut n_pos) = (0.0, 0.0, 0usize, 0usize);
    for (s, k, nl, np) in per_seq {
        sq += s;
        kl += k;
        n_logits += nl;
        n_pos += np;
    }
    Ok(DivergenceReport {
        mean_sq_logit_error: if n_logits > 0 { sq / n_logits as f64 } else { 0.0 },
        mean_kl: if n_pos > 0 { kl / n_pos as f64 } else { 0.0 },
    })
}
