//! Model snapshot container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! offset size  field
//!      0    8  magic "SVISNAP1"
//!      8    1  family: 0 = gmm, 1 = lda
//!      9    3  reserved (zero)
//!     12    4  u32 K (clusters / topics)
//!     16    4  u32 dim (D for gmm, V for lda)
//!     20    8  f64 alpha
//! gmm payload:
//!            8  f64 nu_bar
//!        D·D·8  f64 prior inverse scale, row-major
//!          K·8  f64 theta_hat
//!   K·(8+D·D·8) per cluster: f64 nu_hat, then f64 inverse scale row-major
//! lda payload:
//!            8  f64 lambda_bar
//!        K·V·8  f64 topic lambda_hat, topic-major
//! tail:
//!          4  u32 config text length
//!          n  UTF-8 resolved config ("key = value" lines)
//! ```
//!
//! Natural parameters are stored bit-exactly; expectation caches are
//! recomputed on load.

use std::fs;
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::expfam::{DirichletPosterior, WishartPosterior, WishartPrior};
use crate::lda::{LdaGlobalState, LdaModel};
use crate::linalg::SquareMat;
use crate::mixture::MixGlobalState;

const MAGIC: &[u8; 8] = b"SVISNAP1";

#[derive(Debug, Clone)]
pub enum Snapshot {
    Gmm {
        alpha: f64,
        prior: WishartPrior,
        state: MixGlobalState<WishartPosterior>,
        config_text: String,
    },
    Lda {
        model: LdaModel,
        state: LdaGlobalState,
        config_text: String,
    },
}

impl Snapshot {
    pub fn config(&self) -> Result<TrainConfig> {
        let text = match self {
            Snapshot::Gmm { config_text, .. } => config_text,
            Snapshot::Lda { config_text, .. } => config_text,
        };
        TrainConfig::from_key_values(text)
    }
}

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn mat(&mut self, m: &SquareMat) {
        for &v in m.data() {
            self.f64(v);
        }
    }
}

pub fn snapshot_to_bytes(snap: &Snapshot) -> Vec<u8> {
    let mut w = Writer { bytes: Vec::new() };
    w.bytes.extend_from_slice(MAGIC);
    match snap {
        Snapshot::Gmm {
            alpha,
            prior,
            state,
            config_text,
        } => {
            let d = prior.dim();
            let k = state.k();
            w.bytes.push(0);
            w.bytes.extend_from_slice(&[0, 0, 0]);
            w.u32(k as u32);
            w.u32(d as u32);
            w.f64(*alpha);
            w.f64(prior.nu_bar);
            w.mat(&prior.lambda_bar_inv);
            for &t in &state.theta_hat {
                w.f64(t);
            }
            for post in &state.posteriors {
                w.f64(post.nu_hat);
                w.mat(&post.lambda_hat_inv);
            }
            w.u32(config_text.len() as u32);
            w.bytes.extend_from_slice(config_text.as_bytes());
        }
        Snapshot::Lda {
            model,
            state,
            config_text,
        } => {
            w.bytes.push(1);
            w.bytes.extend_from_slice(&[0, 0, 0]);
            w.u32(model.k as u32);
            w.u32(model.vocab_size as u32);
            w.f64(model.alpha);
            w.f64(model.lambda_bar);
            for topic in &state.topics {
                for &lam in &topic.lambda_hat {
                    w.f64(lam);
                }
            }
            w.u32(config_text.len() as u32);
            w.bytes.extend_from_slice(config_text.as_bytes());
        }
    }
    w.bytes
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::SnapshotFormat(format!(
                "truncated: needed {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn mat(&mut self, d: usize) -> Result<SquareMat> {
        let mut a = Vec::with_capacity(d * d);
        for _ in 0..d * d {
            a.push(self.f64()?);
        }
        Ok(SquareMat::from_rows(d, a))
    }
}

pub fn snapshot_from_bytes(bytes: &[u8]) -> Result<Snapshot> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::SnapshotFormat("bad magic, expected SVISNAP1".into()));
    }
    let family = r.take(1)?[0];
    r.take(3)?;
    let k = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let alpha = r.f64()?;
    match family {
        0 => {
            let nu_bar = r.f64()?;
            let lambda_bar_inv = r.mat(dim)?;
            let prior = WishartPrior::from_inverse_scale(nu_bar, lambda_bar_inv)?;
            let mut theta_hat = Vec::with_capacity(k);
            for _ in 0..k {
                theta_hat.push(r.f64()?);
            }
            let mut posteriors = Vec::with_capacity(k);
            for _ in 0..k {
                let nu_hat = r.f64()?;
                let inv = r.mat(dim)?;
                posteriors.push(WishartPosterior::from_inverse_scale(nu_hat, inv)?);
            }
            let config_text = read_config_text(&mut r)?;
            let state = MixGlobalState::new(theta_hat, posteriors)?;
            Ok(Snapshot::Gmm {
                alpha,
                prior,
                state,
                config_text,
            })
        }
        1 => {
            let lambda_bar = r.f64()?;
            let mut topics = Vec::with_capacity(k);
            for _ in 0..k {
                let mut lam = Vec::with_capacity(dim);
                for _ in 0..dim {
                    lam.push(r.f64()?);
                }
                topics.push(DirichletPosterior::new(lam)?);
            }
            let config_text = read_config_text(&mut r)?;
            let model = LdaModel {
                k,
                vocab_size: dim,
                alpha,
                lambda_bar,
            };
            Ok(Snapshot::Lda {
                model,
                state: LdaGlobalState::new(topics),
                config_text,
            })
        }
        other => Err(Error::SnapshotFormat(format!("unknown family tag {other}"))),
    }
}

fn read_config_text(r: &mut Reader<'_>) -> Result<String> {
    let len = r.u32()? as usize;
    let bytes = r.take(len)?;
    String::from_utf8(bytes.to_vec())
        .map_err(|_| Error::SnapshotFormat("config text is not UTF-8".into()))
}

pub fn write_snapshot(path: &Path, snap: &Snapshot) -> Result<()> {
    fs::write(path, snapshot_to_bytes(snap))?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let bytes = fs::read(path)?;
    snapshot_from_bytes(&bytes)
}
