//! Parameter storage and the handful of differentiable layers the networks use.
//!
//! 3x3 convolutions are computed as nine shifted 1x1 matmuls ("taps"), which
//! backpropagate considerably faster on CPU than the generic conv kernels.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named trainable tensors of one network, kept in a deterministic order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidSpec(format!("duplicate parameter name {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f32, std as f32)
            .map_err(|e| Error::InvalidArgument(format!("bad init std {std}: {e}")))?;
        let values = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and values (as f64), hex encoded.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let vals: Vec<f64> = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            for v in vals {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Snapshot of every parameter as `(shape, f32 values)`.
    pub fn export(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let vals = v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
                Ok((k.clone(), (v.dims().to_vec(), vals)))
            })
            .collect()
    }

    /// Overwrites parameters in place from a snapshot; every parameter must be present.
    pub fn import(&self, prefix: &str, data: &BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let (shape, vals) = data
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {key}")))?;
            if shape.as_slice() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {key} has shape {shape:?}, expected {:?}",
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(vals.clone(), shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.2)?)?)
}

/// `x @ w^T + b` for `x: (B, in)`, `w: (out, in)`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.matmul(&w.t()?)?.broadcast_add(b)?)
}

/// Same-padded 3x3 convolution with tap-major weights `(9, out, in)`.
pub fn conv3x3(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (taps, o, ci) = w.dims3()?;
    if taps != 9 || ci != c {
        return Err(Error::ShapeMismatch(format!(
            "conv weight {:?} incompatible with input {:?}",
            w.dims(),
            x.dims()
        )));
    }
    let xp = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let mut acc: Option<Tensor> = None;
    for ky in 0..3 {
        for kx in 0..3 {
            let xs = xp
                .narrow(2, ky, h)?
                .narrow(3, kx, wd)?
                .contiguous()?
                .reshape((b, c, h * wd))?;
            let wk = w.get(ky * 3 + kx)?;
            let y = wk.broadcast_matmul(&xs)?;
            acc = Some(match acc {
                None => y,
                Some(a) => (a + y)?,
            });
        }
    }
    Ok(acc.unwrap().reshape((b, o, h, wd))?)
}

/// 1x1 convolution with weights `(out, in)`.
pub fn conv1x1(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let o = w.dim(0)?;
    let xs = x.reshape((b, c, h * wd))?;
    Ok(w.broadcast_matmul(&xs)?.reshape((b, o, h, wd))?)
}

pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = bias.dim(0)?;
    Ok(x.broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

pub fn downsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!("cannot halve {h}x{w}")));
    }
    Ok((x
        .reshape((b, c, h / 2, 2, w / 2, 2))?
        .sum(D::Minus1)?
        .sum(3)?
        * 0.25)?)
}

/// `log(1 + exp(x))`, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_conv(x: &Tensor, w_taps: &Tensor) -> Tensor {
        // reference via the backend's convolution, weights re-laid out as (out, in, 3, 3)
        let (_, o, c) = w_taps.dims3().unwrap();
        let w = w_taps.reshape((3, 3, o, c)).unwrap().permute((2, 3, 0, 1)).unwrap().contiguous().unwrap();
        x.conv2d(&w, 1, 1, 1, 1).unwrap()
    }

    #[test]
    fn tap_conv_matches_backend_conv() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (2, 3, 5, 6), &dev).unwrap();
        let w = Tensor::randn(0f32, 1.0, (9, 4, 3), &dev).unwrap();
        let a = conv3x3(&x, &w).unwrap();
        let b = dense_conv(&x, &w);
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-4, "{diff}");
    }

    #[test]
    fn up_then_down_is_identity() {
        let x = Tensor::randn(0f64, 1.0, (1, 2, 3, 3), &Device::Cpu).unwrap();
        let y = downsample2x(&upsample2x(&x).unwrap()).unwrap();
        let diff = (x - y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn softplus_values() {
        let x = Tensor::new(&[0f64, 2.0, -2.0, 50.0], &Device::Cpu).unwrap();
        let y: Vec<f64> = softplus(&x).unwrap().to_vec1().unwrap();
        assert!((y[0] - 2f64.ln()).abs() < 1e-12);
        assert!((y[1] - (1.0 + 2f64.exp()).ln()).abs() < 1e-12);
        assert!((y[2] - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
        assert!((y[3] - 50.0).abs() < 1e-12);
    }

    #[test]
    fn store_hash_tracks_values() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new(DType::F32, &Device::Cpu);
        s.normal("a", &[2, 2], 1.0, &mut rng).unwrap();
        let h1 = s.hash().unwrap();
        assert_eq!(h1, s.hash().unwrap());
        let v = s.get("a").unwrap();
        v.set(&v.as_tensor().affine(1.0, 1.0).unwrap()).unwrap();
        assert_ne!(h1, s.hash().unwrap());
    }

    #[test]
    fn export_import_round_trip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut a = ParamStore::new(DType::F32, &Device::Cpu);
        a.normal("w", &[3, 2], 1.0, &mut rng).unwrap();
        let mut b = ParamStore::new(DType::F32, &Device::Cpu);
        b.constant("w", &[3, 2], 0.0).unwrap();
        let snap: BTreeMap<_, _> = a.export().unwrap().into_iter().map(|(k, v)| (format!("p.{k}"), v)).collect();
        b.import("p.", &snap).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert!(b.import("q.", &snap).is_err());
    }
}
