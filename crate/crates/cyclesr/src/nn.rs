//! Trainable parameter storage, initialization, the Adam optimizer, and the
//! binary checkpoint format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{tensor_fingerprint, Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const CHECKPOINT_MAGIC: &[u8; 4] = b"SSR1";
const CHECKPOINT_VERSION: u32 = 1;

/// One named parameter with its gradient and Adam state.
#[derive(Clone)]
pub struct ParamEntry<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    m: Tensor<T>,
    v: Tensor<T>,
    step: u64,
    pub trainable: bool,
}

impl<T: Scalar> ParamEntry<T> {
    fn new(value: Tensor<T>, trainable: bool) -> Self {
        let dims = value.dims().to_vec();
        ParamEntry {
            value,
            grad: Tensor::zeros(&dims),
            m: Tensor::zeros(&dims),
            v: Tensor::zeros(&dims),
            step: 0,
            trainable,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Ordered map from hierarchical parameter name to value + optimizer state.
/// Iteration follows insertion order, so updates and checkpoints are
/// deterministic.
#[derive(Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, ParamEntry::new(value, trainable));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entry(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if e.value.dims() != value.dims() {
            return Err(Error::shape(format!(
                "set_value {name}: dims {:?} != {:?}",
                value.dims(),
                e.value.dims()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if e.grad.dims() != grad.dims() {
            return Err(Error::shape(format!(
                "grad for {name}: dims {:?} != {:?}",
                grad.dims(),
                e.grad.dims()
            )));
        }
        let dst = e.grad.data_mut();
        for (d, s) in dst.iter_mut().zip(grad.data()) {
            *d += *s;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = Tensor::zeros(&e.grad.dims().to_vec());
        }
    }

    /// One Adam step over every trainable entry (β1 0.9, β2 0.999, ε 1e-8,
    /// bias correction); gradients are zeroed afterwards. A non-finite
    /// gradient aborts with the offending parameter named.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        let b1 = T::cast_from(ADAM_BETA1);
        let b2 = T::cast_from(ADAM_BETA2);
        let eps = T::cast_from(ADAM_EPS);
        let lr_t = T::cast_from(lr);
        for (name, e) in self.entries.iter_mut() {
            if !e.trainable {
                continue;
            }
            if let Some(i) = e.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite gradient for parameter {name} at flat index {i}"
                )));
            }
            e.step += 1;
            let t = e.step as i32;
            let bc1 = T::one() - b1.powi(t);
            let bc2 = T::one() - b2.powi(t);
            let g = e.grad.data();
            let m = e.m.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
            }
            let v = e.v.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            }
            let m = e.m.data();
            let v = e.v.data();
            let val = e.value.data_mut();
            for i in 0..val.len() {
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                val[i] = val[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
            e.grad = Tensor::zeros(&e.grad.dims().to_vec());
        }
        Ok(())
    }

    /// Fingerprint of all values, for frozen-parameter assertions.
    pub fn fingerprint(&self) -> u64 {
        tensor_fingerprint(self.entries.values().map(|e| e.value.clone()))
    }

    /// Fingerprint restricted to names with the given prefix.
    pub fn fingerprint_prefix(&self, prefix: &str) -> u64 {
        tensor_fingerprint(
            self.entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(_, e)| e.value.clone()),
        )
    }

    /// Clone the entries of another store into this one (names must be fresh).
    pub fn absorb(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (k, e) in &other.entries {
            if self.entries.contains_key(k) {
                return Err(Error::invalid(format!("duplicate parameter name {k}")));
            }
            self.entries.insert(k.clone(), e.clone());
        }
        Ok(())
    }
}

/// Seeded He-normal initializer: weights ~ N(0, sqrt(2/fan_in)).
pub struct Initializer {
    rng: ChaCha12Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// He-normal draw for a conv/deconv weight; `fan_in` is the feeding
    /// channel count times the kernel area.
    pub fn he_normal<T: Scalar>(&mut self, dims: &[usize], fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        Tensor::from_fn(dims, |_| T::cast_from(dist.sample(&mut self.rng)))
    }
}

/// Standard-normal tensor from a dedicated seed (noise channels).
pub fn seeded_normal<T: Scalar>(dims: &[usize], std: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    if std == 0.0 {
        return Tensor::zeros(dims);
    }
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(dims, |_| T::cast_from(dist.sample(&mut rng)))
}

/// Serialize parameter values (not optimizer state) to the `SSR1` format:
/// magic, version u32, entry count u32, then per entry name (u32 length +
/// UTF-8), ndims u32, dims u32 each, and raw little-endian f32 values.
pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.entries.len() as u32).to_le_bytes())?;
    for (name, e) in &store.entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        let dims = e.value.dims();
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for &d in dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in e.value.data() {
            w.write_all(&(v.cast_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format("parameter name is not UTF-8"))?;
        let ndims = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(ndims);
        let mut numel: usize = 1;
        for _ in 0..ndims {
            let d = read_u32(&mut r)? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::format("dim product overflow"))?;
            dims.push(d);
        }
        if numel > (1 << 31) {
            return Err(Error::format(format!("entry {name} too large: {numel} elements")));
        }
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf)?;
            data.push(T::cast_from(f32::from_le_bytes(buf) as f64));
        }
        let value = Tensor::from_vec(&dims, data)?;
        store.insert(name, value, true)?;
    }
    Ok(store)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format("truncated checkpoint file"))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn he_init_is_seed_deterministic_and_shaped() {
        let w1: Tensor<f32> = Initializer::new(7).he_normal(&[32, 32, 3, 3], 288);
        let w2: Tensor<f32> = Initializer::new(7).he_normal(&[32, 32, 3, 3], 288);
        assert_eq!(w1.data(), w2.data());
        let w3: Tensor<f32> = Initializer::new(8).he_normal(&[32, 32, 3, 3], 288);
        assert_ne!(w1.data(), w3.data());
    }

    #[test]
    fn he_init_std_matches_fan_in() {
        // empirical std of a 3x3x32x32 draw within 10% of sqrt(2/288)
        let w: Tensor<f64> = Initializer::new(1).he_normal(&[32, 32, 3, 3], 288);
        let n = w.numel() as f64;
        let mean = w.sum_f64() / n;
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let want = (2.0f64 / 288.0).sqrt();
        let got = var.sqrt();
        assert!((got - want).abs() / want < 0.10, "std {got} vs {want}");
    }

    #[test]
    fn adam_zero_grad_keeps_parameters() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(), true)
            .unwrap();
        store.adam_step(0.1).unwrap();
        assert_eq!(store.value("w").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(store.entry("w").unwrap().step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // bias-corrected first step with |g| >> eps moves by ~ -lr*sign(g)
        let mut store = ParamStore::<f64>::new();
        store
            .insert("w", Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap(), true)
            .unwrap();
        store
            .accumulate_grad("w", &Tensor::from_vec(&[2], vec![10.0, -0.5]).unwrap())
            .unwrap();
        store.adam_step(0.01).unwrap();
        let w = store.value("w").unwrap().data();
        assert!((w[0] + 0.01).abs() < 1e-8, "{w:?}");
        assert!((w[1] - 0.01).abs() < 1e-7, "{w:?}");
    }

    #[test]
    fn adam_converges_on_scalar_quadratic() {
        // 200 steps on f(w) = (w-3)^2 from w=0, lr=0.1 ends within 0.1 of 3
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(0.0), true).unwrap();
        for _ in 0..200 {
            let w = store.value("w").unwrap().item();
            let g = 2.0 * (w - 3.0);
            store
                .accumulate_grad("w", &Tensor::scalar(g))
                .unwrap();
            store.adam_step(0.1).unwrap();
        }
        let w = store.value("w").unwrap().item();
        assert!((w - 3.0).abs() < 0.1, "w = {w}");
    }

    #[test]
    fn adam_lr_zero_never_moves() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert("w", Tensor::from_vec(&[3], vec![0.5, -0.25, 4.0]).unwrap(), true)
            .unwrap();
        for i in 0..5 {
            store
                .accumulate_grad(
                    "w",
                    &Tensor::from_vec(&[3], vec![1.0 + i as f64, -2.0, 0.1]).unwrap(),
                )
                .unwrap();
            store.adam_step(0.0).unwrap();
        }
        assert_eq!(store.value("w").unwrap().data(), &[0.5, -0.25, 4.0]);
    }

    #[test]
    fn adam_update_is_gradient_scale_invariant() {
        // scaling all gradients by c > 0 leaves the bias-corrected step
        // direction and (for |g| >> eps) magnitude unchanged
        let run = |scale: f64| {
            let mut store = ParamStore::<f64>::new();
            store.insert("w", Tensor::scalar(1.0), true).unwrap();
            for _ in 0..3 {
                store
                    .accumulate_grad("w", &Tensor::scalar(1e5 * scale))
                    .unwrap();
                store.adam_step(0.05).unwrap();
            }
            store.value("w").unwrap().item()
        };
        let a = run(1.0);
        let b = run(7.5);
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.insert("layer.weight", Tensor::scalar(1.0), true).unwrap();
        store
            .accumulate_grad("layer.weight", &Tensor::scalar(f64::NAN))
            .unwrap();
        let err = store.adam_step(0.1).unwrap_err();
        assert!(err.to_string().contains("layer.weight"));
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ssr");
        let mut store = ParamStore::<f32>::new();
        store
            .insert("a.weight", Tensor::from_vec(&[2, 3], vec![0.1, -0.2, 0.3, 4.0, -5.5, 0.0]).unwrap(), true)
            .unwrap();
        store
            .insert("a.bias", Tensor::from_vec(&[3], vec![1e-20, 2.5e7, -0.125]).unwrap(), true)
            .unwrap();
        save_checkpoint(&store, &path).unwrap();
        let loaded: ParamStore<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        let names: Vec<_> = loaded.names().collect();
        assert_eq!(names, vec!["a.weight", "a.bias"]);
        for name in ["a.weight", "a.bias"] {
            assert_eq!(
                store.value(name).unwrap().data(),
                loaded.value(name).unwrap().data()
            );
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ssr");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn checkpoint_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ssr");
        let mut store = ParamStore::<f32>::new();
        store
            .insert("w", Tensor::from_vec(&[4], vec![1.0; 4]).unwrap(), true)
            .unwrap();
        save_checkpoint(&store, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn checkpoint_file_size_matches_format_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("size.ssr");
        let mut store = ParamStore::<f32>::new();
        store.insert("ab", Tensor::<f32>::zeros(&[2, 5]), true).unwrap();
        store.insert("c", Tensor::<f32>::zeros(&[7]), true).unwrap();
        save_checkpoint(&store, &path).unwrap();
        let size = std::fs::metadata(&path).unwrap().len();
        // header: 4 magic + 4 version + 4 count
        // entry: 4 + name + 4 + 4*ndims + 4*numel
        let want = 12 + (4 + 2 + 4 + 8 + 40) + (4 + 1 + 4 + 4 + 28);
        assert_eq!(size, want as u64);
    }
}
