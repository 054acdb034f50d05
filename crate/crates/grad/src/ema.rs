use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Shadow copy of a parameter store tracking `decay * shadow + (1 - decay) * live`.
#[derive(Clone, Debug)]
pub struct Ema<T> {
    decay: f64,
    shadow: Vec<Tensor<T>>,
    updates: u64,
}

impl<T: Real> Ema<T> {
    pub fn new(store: &ParamStore<T>, decay: f64) -> Self {
        assert!((0.0..=1.0).contains(&decay), "EMA decay must lie in [0, 1]");
        Self {
            decay,
            shadow: store.iter().map(|(_, _, t)| t.clone()).collect(),
            updates: 0,
        }
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn update(&mut self, live: &ParamStore<T>) {
        for (i, shadow) in self.shadow.iter_mut().enumerate() {
            ema_update(shadow, live.get(ParamId(i)), self.decay);
        }
        self.updates += 1;
    }

    pub fn shadow(&self, id: ParamId) -> &Tensor<T> {
        &self.shadow[id.0]
    }

    /// A store with the live names and shadow values.
    pub fn to_store(&self, live: &ParamStore<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (id, name, _) in live.iter() {
            out.add(name, self.shadow[id.0].clone());
        }
        out
    }

    pub(crate) fn from_parts(decay: f64, shadow: Vec<Tensor<T>>, updates: u64) -> Self {
        Self {
            decay,
            shadow,
            updates,
        }
    }

    pub(crate) fn tensors(&self) -> &[Tensor<T>] {
        &self.shadow
    }
}

/// `shadow <- decay * shadow + (1 - decay) * live`, accumulated in f64.
pub fn ema_update<T: Real>(shadow: &mut Tensor<T>, live: &Tensor<T>, decay: f64) {
    assert_eq!(shadow.shape(), live.shape());
    for (s, &l) in shadow.data_mut().iter_mut().zip(live.data()) {
        *s = T::of(decay * s.f64() + (1.0 - decay) * l.f64());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(&[3], v));
        s
    }

    #[test]
    fn decay_zero_copies_live() {
        let mut ema = Ema::new(&store(0.0), 0.0);
        ema.update(&store(2.5));
        assert_eq!(ema.shadow(ParamId(0)).data(), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn decay_one_freezes_shadow() {
        let mut ema = Ema::new(&store(1.0), 1.0);
        ema.update(&store(7.0));
        assert_eq!(ema.shadow(ParamId(0)).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_live_follows_geometric_series() {
        let (s0, live, d, n) = (3.0, -1.0, 0.9, 25);
        let mut ema = Ema::new(&store(s0), d);
        let l = store(live);
        for _ in 0..n {
            ema.update(&l);
        }
        let dn = d.powi(n);
        let expected = s0 * dn + live * (1.0 - dn);
        for &v in ema.shadow(ParamId(0)).data() {
            assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        }
    }
}
