//! Binary model containers.
//!
//! All integers are little-endian `u32`, `k` and `rec` are `f64`, and every
//! tensor is stored row-major as little-endian `f32`.
//!
//! `MLRB`: magic, version, `L`, `C`, `k`, `rec`, depression flag (`u8`), then
//! per layer `N`, `d_in`, `o` (`o = 0` for the final layer) followed by
//! centroids, beta_raw, beta_init_raw and projections.
//!
//! `MLPB`: magic, version, layer count, then per layer `in`, `out`, weight
//! and bias.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::Bounds;
use crate::mlp::{AffineLayer, Mlp};
use crate::model::{Classifier, Scored};
use crate::rbf::{HiddenSpec, Network, NetworkConfig, RbfLayer};
use crate::tensor::{Scalar, Tensor};

pub const RBF_MAGIC: &[u8; 4] = b"MLRB";
pub const MLP_MAGIC: &[u8; 4] = b"MLPB";
pub const FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        for v in t.data() {
            self.0.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!("model file truncated at byte {}", self.pos)));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn tensor<T: Scalar>(&mut self, rows: usize, cols: usize) -> Result<Tensor<T>> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let data = self
            .take(n)?
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        Tensor::from_vec(rows, cols, data)
    }
    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Format(format!(
                "bad magic, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        Ok(())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after model",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_network<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let cfg = net.config();
    let mut w = Writer(RBF_MAGIC.to_vec());
    w.u32(FORMAT_VERSION as usize);
    w.u32(net.layers().len());
    w.u32(cfg.num_classes);
    w.f64(cfg.k);
    w.f64(cfg.recovery);
    w.0.push(u8::from(cfg.depression));
    for l in net.layers() {
        w.u32(l.num_centroids());
        w.u32(l.input_dim());
        w.u32(l.projections.as_ref().map_or(0, |p| p.cols()));
        w.tensor(&l.centroids);
        w.tensor(&l.beta_raw);
        w.tensor(&l.beta_init_raw);
        if let Some(p) = &l.projections {
            w.tensor(p);
        }
    }
    w.0
}

/// Decoded networks count as initialized.
pub fn decode_network<T: Scalar>(bytes: &[u8]) -> Result<Network<T>> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(RBF_MAGIC)?;
    let depth = r.u32()?;
    let num_classes = r.u32()?;
    let k = r.f64()?;
    let recovery = r.f64()?;
    let depression = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(Error::Format(format!("depression flag {v} is not 0 or 1"))),
    };
    if depth == 0 {
        return Err(Error::Format("model has no layers".into()));
    }
    let mut layers = Vec::with_capacity(depth);
    let mut hidden = Vec::new();
    let mut input_dim = 0;
    for i in 0..depth {
        let (n, d_in, o) = (r.u32()?, r.u32()?, r.u32()?);
        if i == 0 {
            input_dim = d_in;
        }
        let is_final = i + 1 == depth;
        if is_final != (o == 0) {
            return Err(Error::Format(format!("layer {i}: projection width {o} is inconsistent")));
        }
        let centroids = r.tensor(n, d_in)?;
        let beta_raw = r.tensor(1, n)?;
        let beta_init_raw = r.tensor(1, n)?;
        let projections = if is_final {
            None
        } else {
            hidden.push(HiddenSpec { centroids: n, projection: o });
            Some(r.tensor(n, o)?)
        };
        layers.push(RbfLayer {
            centroids,
            beta_raw,
            beta_init_raw,
            projections,
            k,
        });
    }
    r.finish()?;
    let config = NetworkConfig {
        input_dim,
        hidden,
        num_classes,
        k,
        recovery,
        depression,
        seed: 0,
    };
    Network::from_layers(config, layers).map_err(|e| Error::Format(format!("inconsistent model: {e}")))
}

pub fn encode_mlp<T: Scalar>(mlp: &Mlp<T>) -> Vec<u8> {
    let mut w = Writer(MLP_MAGIC.to_vec());
    w.u32(FORMAT_VERSION as usize);
    w.u32(mlp.layers().len());
    for l in mlp.layers() {
        w.u32(l.weight.rows());
        w.u32(l.weight.cols());
        w.tensor(&l.weight);
        w.tensor(&l.bias);
    }
    w.0
}

pub fn decode_mlp<T: Scalar>(bytes: &[u8]) -> Result<Mlp<T>> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(MLP_MAGIC)?;
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let (i, o) = (r.u32()?, r.u32()?);
        layers.push(AffineLayer {
            weight: r.tensor(i, o)?,
            bias: r.tensor(1, o)?,
        });
    }
    r.finish()?;
    Mlp::from_layers(layers).map_err(|e| Error::Format(format!("inconsistent model: {e}")))
}

/// Either model kind, as read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Rbf(Network<f32>),
    Mlp(Mlp<f32>),
}

impl AnyModel {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        match bytes.get(..4) {
            Some(m) if m == RBF_MAGIC => decode_network(bytes).map(Self::Rbf),
            Some(m) if m == MLP_MAGIC => decode_mlp(bytes).map(Self::Mlp),
            _ => Err(Error::Format("unknown model magic".into())),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            Self::Rbf(n) => encode_network(n),
            Self::Mlp(m) => encode_mlp(m),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Rbf(_) => "mlrbfn",
            Self::Mlp(_) => "mlp",
        }
    }
}

impl Classifier for AnyModel {
    fn input_dim(&self) -> usize {
        match self {
            Self::Rbf(n) => Classifier::input_dim(n),
            Self::Mlp(m) => Classifier::input_dim(m),
        }
    }
    fn num_classes(&self) -> usize {
        match self {
            Self::Rbf(n) => Classifier::num_classes(n),
            Self::Mlp(m) => Classifier::num_classes(m),
        }
    }
    fn score(&self, x: &Tensor<f32>) -> Result<Scored> {
        match self {
            Self::Rbf(n) => n.score(x),
            Self::Mlp(m) => m.score(x),
        }
    }
}

/// Parses `xmin,xmax,ymin,ymax`.
pub fn parse_bounds(text: &str) -> Result<Bounds> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Usage(format!("bounds {text:?}: {e}")))?;
    match v[..] {
        [x_min, x_max, y_min, y_max] if x_min < x_max && y_min < y_max => Ok(Bounds { x_min, x_max, y_min, y_max }),
        _ => Err(Error::Usage(format!("bounds {text:?} must be xmin,xmax,ymin,ymax with min < max"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::MlpConfig;

    fn net() -> Network<f32> {
        let mut cfg = NetworkConfig::uniform(3, 2, 5, 4, 3);
        cfg.seed = 7;
        cfg.recovery = 1.1;
        Network::new(cfg).unwrap()
    }

    #[test]
    fn network_round_trip() {
        let a = net();
        let bytes = encode_network(&a);
        assert_eq!(&bytes[..4], b"MLRB");
        let b: Network<f32> = decode_network(&bytes).unwrap();
        assert_eq!(a.layers(), b.layers());
        assert_eq!(b.config().recovery, 1.1);
        assert!(b.is_initialized());
        assert_eq!(encode_network(&b), bytes);
    }

    #[test]
    fn mlp_round_trip_through_any_model() {
        let m = Mlp::<f32>::new(&MlpConfig {
            input_dim: 2,
            width: 6,
            hidden_layers: 2,
            num_classes: 4,
            seed: 1,
        })
        .unwrap();
        let any = AnyModel::decode(&encode_mlp(&m)).unwrap();
        assert_eq!(any, AnyModel::Mlp(m));
        assert_eq!(any.kind(), "mlp");
    }

    #[test]
    fn corrupted_files_are_format_errors() {
        let bytes = encode_network(&net());
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(AnyModel::decode(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_network::<f32>(&extra), Err(Error::Format(_))));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(decode_network::<f32>(&bad_version), Err(Error::Format(_))));
    }

    #[test]
    fn bounds_parsing() {
        assert_eq!(parse_bounds("-4,4,-4,4").unwrap(), Bounds::square(4.0));
        assert!(parse_bounds("1,0,0,1").is_err());
        assert!(parse_bounds("a,b").is_err());
    }
}
