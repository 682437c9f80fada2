//! Token-level decoder: embedding table, a stack of blocks, final norm, unembedding.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{normal_matrix, BlockParams, BlockVars, MlpKind};
use crate::scalar::Scalar;
use crate::tape::{Graph, HeadConfig, Var};

/// Token id of the beginning-of-sequence marker in every vocabulary.
pub const BOS: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vocab: usize,
    pub d_model: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub heads: HeadConfig,
    #[serde(default)]
    pub mlp: MlpKind,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.heads.validate()?;
        if self.vocab < 2 || self.d_model == 0 || self.hidden == 0 || self.n_layers == 0 {
            return Err(Error::Config(format!("degenerate model spec {self:?}")));
        }
        if self.heads.head_dim % 2 != 0 {
            return Err(Error::Config("head_dim must be even".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub embed: Array2<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: Array2<T>,
    pub unembed: Array2<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(spec: &ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let d = spec.d_model;
        let blocks = (0..spec.n_layers)
            .map(|_| BlockParams::init(d, spec.hidden, spec.heads, spec.mlp, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            embed: normal_matrix(spec.vocab, d, 1.0, rng),
            blocks,
            final_norm: Array2::ones((1, d)),
            unembed: normal_matrix(d, spec.vocab, 1.0 / (d as f64).sqrt(), rng),
        })
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Array2<T>)> {
        let mut v = vec![(format!("{prefix}embed"), &self.embed)];
        v.extend(blocks_named(&self.blocks, prefix));
        v.push((format!("{prefix}final_norm"), &self.final_norm));
        v.push((format!("{prefix}unembed"), &self.unembed));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut v = vec![&mut self.embed];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.push(&mut self.final_norm);
        v.push(&mut self.unembed);
        v
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ModelVars {
        let leaf = |g: &mut Graph<T>, t: &Array2<T>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let embed = leaf(g, &self.embed);
        let blocks = self.blocks.iter().map(|b| b.bind(g, trainable)).collect();
        let final_norm = leaf(g, &self.final_norm);
        let unembed = leaf(g, &self.unembed);
        ModelVars {
            embed,
            blocks,
            final_norm,
            unembed,
        }
    }

    /// Structure already-placed leaves, taken in [`ModelVars::vars`] order.
    pub fn vars_from(&self, it: &mut impl Iterator<Item = Var>) -> ModelVars {
        let embed = it.next().expect("tensor count");
        let blocks = self.blocks.iter().map(|b| b.vars_from(it)).collect();
        ModelVars {
            embed,
            blocks,
            final_norm: it.next().expect("tensor count"),
            unembed: it.next().expect("tensor count"),
        }
    }
}

pub(crate) fn blocks_named<'a, T: Scalar>(blocks: &'a [BlockParams<T>], prefix: &str) -> Vec<(String, &'a Array2<T>)> {
    let mut v = Vec::new();
    for (i, b) in blocks.iter().enumerate() {
        for (n, t) in b.named_tensors() {
            v.push((format!("{prefix}block{i}.{n}"), t));
        }
    }
    v
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
    pub unembed: Var,
}

impl ModelVars {
    /// Same order as [`ModelParams::tensors_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.embed];
        for b in &self.blocks {
            v.extend(b.vars());
        }
        v.push(self.final_norm);
        v.push(self.unembed);
        v
    }
}

pub mod checkpoint {
    //! Flat named-tensor files.
    //!
    //! Layout (little endian): `b"GLCK"`, `u32` version, `u8` element width,
    //! `u32` tensor count, then per tensor `u32` name length, name bytes,
    //! `u64` rows, `u64` cols; the element data of all tensors follows in the
    //! same order.

    use super::*;

    const MAGIC: &[u8; 4] = b"GLCK";
    pub const VERSION: u32 = 1;

    pub fn encode<T: Scalar>(tensors: &[(String, &Array2<T>)]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::WIDTH);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        }
        for (_, t) in tensors {
            for v in t.iter() {
                out.extend(v.to_le_bytes_vec());
            }
        }
        out
    }

    struct Reader<'a> {
        b: &'a [u8],
        at: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            let end = self.at.checked_add(n).filter(|&e| e <= self.b.len());
            let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
            let s = &self.b[self.at..end];
            self.at = end;
            Ok(s)
        }
        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
    }

    pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Array2<T>)>> {
        let mut r = Reader { b: bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let width = r.take(1)?[0];
        if width != T::WIDTH {
            return Err(Error::Format(format!("dtype width {width}, expected {}", T::WIDTH)));
        }
        let count = r.u32()? as usize;
        let mut heads = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            heads.push((name, rows, cols));
        }
        let w = width as usize;
        let mut out = Vec::with_capacity(count);
        for (name, rows, cols) in heads {
            let n = rows.checked_mul(cols).ok_or_else(|| Error::Format("size overflow".into()))?;
            let raw = r.take(n.checked_mul(w).ok_or_else(|| Error::Format("size overflow".into()))?)?;
            let data = raw.chunks_exact(w).map(T::from_le_slice).collect();
            out.push((name, Array2::from_shape_vec((rows, cols), data).expect("shape")));
        }
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(out)
    }

    /// Copy decoded tensors into `targets`, requiring identical names and shapes.
    pub fn restore<T: Scalar>(names: &[String], targets: Vec<&mut Array2<T>>, loaded: Vec<(String, Array2<T>)>) -> Result<()> {
        if loaded.len() != targets.len() {
            return Err(Error::Format(format!("{} tensors in file, model has {}", loaded.len(), targets.len())));
        }
        for ((want, dst), (name, src)) in names.iter().zip(&targets).zip(&loaded) {
            if want != name {
                return Err(Error::Format(format!("tensor {name} where {want} was expected")));
            }
            if dst.dim() != src.dim() {
                return Err(Error::Shape(format!("{name}: file {:?}, model {:?}", src.dim(), dst.dim())));
            }
        }
        for (dst, (_, src)) in targets.into_iter().zip(loaded) {
            *dst = src;
        }
        Ok(())
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn to_checkpoint(&self) -> Vec<u8> {
        checkpoint::encode(&self.named_tensors(""))
    }

    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        let loaded = checkpoint::decode(bytes)?;
        let names: Vec<String> = self.named_tensors("").into_iter().map(|(n, _)| n).collect();
        checkpoint::restore(&names, self.tensors_mut(), loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> ModelSpec {
        ModelSpec {
            vocab: 11,
            d_model: 8,
            hidden: 12,
            n_layers: 2,
            heads: HeadConfig::new(2, 1, 4).unwrap(),
            mlp: MlpKind::GeGlu,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = ModelParams::<f64>::init(&spec(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bytes = m.to_checkpoint();
        let mut other = ModelParams::<f64>::init(&spec(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        other.load_checkpoint(&bytes).unwrap();
        assert_eq!(m, other);
        assert_eq!(other.to_checkpoint(), bytes);
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let m = ModelParams::<f64>::init(&spec(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bytes = m.to_checkpoint();
        let mut s = spec();
        s.hidden = 16;
        let mut other = ModelParams::<f64>::init(&s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(other.load_checkpoint(&bytes), Err(Error::Shape(_))));
        let mut f32m = ModelParams::<f32>::init(&spec(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(f32m.load_checkpoint(&bytes), Err(Error::Format(_))));
        assert!(other.load_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn bound_var_order_matches_tensors() {
        let m = ModelParams::<f64>::init(&spec(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::new();
        let vars = m.bind(&mut g, true).vars();
        let mut m2 = m.clone();
        let ts = m2.tensors_mut();
        assert_eq!(vars.len(), ts.len());
        for (v, t) in vars.iter().zip(ts) {
            assert_eq!(g.value(*v), t);
        }
    }
}
