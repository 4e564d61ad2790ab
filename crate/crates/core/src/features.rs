//! Dense feature maps, RoI pooling, class prototypes and cosine scoring.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, ClassId};

/// Row-major `H x W x C` tensor. `stride` is the number of image pixels per
/// feature cell along both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    stride: f32,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, stride: f32, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidFeatureMap(format!(
                "dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if !(stride.is_finite() && stride > 0.0) {
            return Err(Error::InvalidFeatureMap(format!("stride must be positive, got {stride}")));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::InvalidFeatureMap(format!(
                "expected {expected} values for {height}x{width}x{channels}, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidFeatureMap(format!("non-finite value at offset {i}")));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            stride,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, stride: f32, value: f32) -> Result<Self> {
        Self::new(height, width, channels, stride, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn stride(&self) -> f32 {
        self.stride
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let off = (row * self.width + col) * self.channels;
        &self.data[off..off + self.channels]
    }

    /// Image-space extent `(width, height)` covered by the map.
    pub fn extent(&self) -> (f64, f64) {
        let s = f64::from(self.stride);
        (self.width as f64 * s, self.height as f64 * s)
    }

    /// Bilinear sample at a continuous feature-space point. Cell `(r, c)`
    /// holds the value at feature coordinate `(c + 0.5, r + 0.5)`; points
    /// beyond the outermost centers clamp to the border.
    fn sample_into(&self, fx: f64, fy: f64, out: &mut [f64]) {
        let u = (fx - 0.5).clamp(0.0, (self.width - 1) as f64);
        let v = (fy - 0.5).clamp(0.0, (self.height - 1) as f64);
        let c0 = u.floor() as usize;
        let r0 = v.floor() as usize;
        let c1 = (c0 + 1).min(self.width - 1);
        let r1 = (r0 + 1).min(self.height - 1);
        let du = u - c0 as f64;
        let dv = v - r0 as f64;
        let weights = [
            ((r0, c0), (1.0 - dv) * (1.0 - du)),
            ((r0, c1), (1.0 - dv) * du),
            ((r1, c0), dv * (1.0 - du)),
            ((r1, c1), dv * du),
        ];
        for ((r, c), w) in weights {
            if w == 0.0 {
                continue;
            }
            for (o, &x) in out.iter_mut().zip(self.cell(r, c)) {
                *o += w * f64::from(x);
            }
        }
    }
}

/// A pooled C-dimensional feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_id: ClassId,
    pub mean_embedding: Embedding,
    pub shot_count: usize,
}

/// RoIAlign-style pooling with one bilinear sample at each of the `S x S` bin
/// centres, averaged into a single C-vector.
pub fn roi_pool(fmap: &FeatureMap, bbox: &BBox, pool_size: usize) -> Result<Embedding> {
    if pool_size == 0 {
        return Err(Error::Config("pool size must be at least 1".into()));
    }
    let (ew, eh) = fmap.extent();
    if bbox.x2() <= 0.0 || bbox.y2() <= 0.0 || bbox.x1() >= ew || bbox.y1() >= eh {
        return Err(Error::OutOfExtent {
            width: ew,
            height: eh,
        });
    }

    let s = f64::from(fmap.stride());
    let (fx1, fy1) = (bbox.x1() / s, bbox.y1() / s);
    let bin_w = bbox.width() / s / pool_size as f64;
    let bin_h = bbox.height() / s / pool_size as f64;

    let mut acc = vec![0.0; fmap.channels()];
    for by in 0..pool_size {
        let fy = fy1 + (by as f64 + 0.5) * bin_h;
        for bx in 0..pool_size {
            let fx = fx1 + (bx as f64 + 0.5) * bin_w;
            fmap.sample_into(fx, fy, &mut acc);
        }
    }
    let n = (pool_size * pool_size) as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(Embedding(acc))
}

/// One annotated shot: the feature map of its image, the GT box and class.
#[derive(Debug, Clone, Copy)]
pub struct Shot<'a> {
    pub fmap: &'a FeatureMap,
    pub bbox: BBox,
    pub class_id: ClassId,
}

/// Pairwise summation over a canonically sorted copy, so the result does not
/// depend on the input order down to the last bit.
pub(crate) fn order_independent_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    pairwise_sum(values)
}

fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => {
            let (a, b) = v.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Per-class mean of pooled shot embeddings, for every class in `classes`.
pub fn build_prototypes(shots: &[Shot<'_>], classes: &[ClassId], pool_size: usize) -> Result<Vec<ClassPrototype>> {
    let mut pooled: BTreeMap<ClassId, Vec<Embedding>> = BTreeMap::new();
    for shot in shots {
        let e = roi_pool(shot.fmap, &shot.bbox, pool_size)
            .map_err(|e| e.context(format!("pooling shot of class {}", shot.class_id)))?;
        pooled.entry(shot.class_id).or_default().push(e);
    }

    classes
        .iter()
        .map(|&class_id| {
            let embs = pooled.get(&class_id).ok_or(Error::MissingShots(class_id))?;
            Ok(ClassPrototype {
                class_id,
                mean_embedding: mean_embedding(embs)?,
                shot_count: embs.len(),
            })
        })
        .collect()
}

pub(crate) fn mean_embedding(embs: &[Embedding]) -> Result<Embedding> {
    let dim = embs[0].len();
    if let Some(bad) = embs.iter().find(|e| e.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    let k = embs.len() as f64;
    let mut column = vec![0.0; embs.len()];
    let mean = (0..dim)
        .map(|c| {
            for (slot, e) in column.iter_mut().zip(embs) {
                *slot = e.0[c];
            }
            order_independent_sum(&mut column) / k
        })
        .collect();
    Ok(Embedding(mean))
}

/// Temperature-scaled cosine similarity of `embedding` to each prototype, in
/// prototype order.
pub fn cosine_scores(embedding: &Embedding, prototypes: &[ClassPrototype], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let en = embedding.norm();
    if en == 0.0 {
        return Err(Error::ZeroNorm("embedding"));
    }
    prototypes
        .iter()
        .map(|p| {
            if p.mean_embedding.len() != embedding.len() {
                return Err(Error::DimensionMismatch {
                    expected: p.mean_embedding.len(),
                    got: embedding.len(),
                });
            }
            let pn = p.mean_embedding.norm();
            if pn == 0.0 {
                return Err(Error::ZeroNorm("prototype"));
            }
            Ok(temperature * embedding.dot(&p.mean_embedding) / (en * pn))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn proto(class: u32, v: Vec<f64>) -> ClassPrototype {
        ClassPrototype {
            class_id: ClassId(class),
            mean_embedding: Embedding(v),
            shot_count: 1,
        }
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let m = FeatureMap::filled(5, 7, 3, 4.0, 2.5).unwrap();
        let e = roi_pool(&m, &bx(3.0, 1.0, 20.0, 13.0), 7).unwrap();
        assert!(e.0.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn single_cell_map() {
        let m = FeatureMap::new(1, 1, 2, 16.0, vec![0.25, -1.5]).unwrap();
        let e = roi_pool(&m, &bx(2.0, 3.0, 9.0, 14.0), 3).unwrap();
        assert_eq!(e.0, vec![0.25, -1.5]);
    }

    #[test]
    fn two_by_two_hand_bilinear() {
        // cells: (0,0)=1, (0,1)=2, (1,0)=3, (1,1)=4, stride 1, extent 2x2
        let m = FeatureMap::new(2, 2, 1, 1.0, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // one bin centred at (1, 1): u = v = 0.5, mean of the four cells
        let e = roi_pool(&m, &bx(0.5, 0.5, 1.5, 1.5), 1).unwrap();
        assert!((e.0[0] - 2.5).abs() < 1e-12);
        // 2x2 bins: centres at 0.75 / 1.25 -> u, v in {0.25, 0.75}.
        // value(u, v) = 1 + u + 2v; mean over the grid = 1 + 0.5 + 1.0
        let e = roi_pool(&m, &bx(0.5, 0.5, 1.5, 1.5), 2).unwrap();
        assert!((e.0[0] - 2.5).abs() < 1e-12);
        // off-centre box, S = 1: centre (1.0, 0.75) -> u = 0.5, v = 0.25
        // value = 1 + 0.5 + 0.5 = 2.0
        let e = roi_pool(&m, &bx(0.5, 0.5, 1.5, 1.0), 1).unwrap();
        assert!((e.0[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_extent_is_an_error() {
        let m = FeatureMap::filled(4, 4, 1, 2.0, 1.0).unwrap();
        assert!(matches!(
            roi_pool(&m, &bx(8.0, 0.0, 10.0, 2.0), 2),
            Err(Error::OutOfExtent { .. })
        ));
        assert!(matches!(
            roi_pool(&m, &bx(-5.0, -5.0, -1.0, -1.0), 2),
            Err(Error::OutOfExtent { .. })
        ));
        // partially outside is fine
        assert!(roi_pool(&m, &bx(6.0, 6.0, 12.0, 12.0), 2).is_ok());
    }

    #[test]
    fn invalid_maps_rejected() {
        assert!(FeatureMap::new(2, 2, 3, 1.0, vec![0.0; 11]).is_err());
        assert!(FeatureMap::new(1, 1, 1, 0.0, vec![0.0]).is_err());
        assert!(FeatureMap::new(1, 1, 1, 1.0, vec![f32::NAN]).is_err());
    }

    #[test]
    fn prototype_examples() {
        // per-cell constant maps make the pooled embedding equal to the constant
        let maps: Vec<FeatureMap> = [[1.0f32, 2.0], [-1.0, -2.0], [4.0, 0.5], [0.0, 3.0], [2.0, 2.0]]
            .iter()
            .map(|v| FeatureMap::new(1, 1, 2, 8.0, v.to_vec()).unwrap())
            .collect();
        let b = bx(1.0, 1.0, 6.0, 6.0);
        let shot = |i: usize, c: u32| Shot {
            fmap: &maps[i],
            bbox: b,
            class_id: ClassId(c),
        };

        let p = build_prototypes(&[shot(0, 7)], &[ClassId(7)], 7).unwrap();
        assert_eq!(p[0].mean_embedding.0, vec![1.0, 2.0]);
        assert_eq!(p[0].shot_count, 1);

        let p = build_prototypes(&[shot(0, 7), shot(1, 7)], &[ClassId(7)], 7).unwrap();
        assert_eq!(p[0].mean_embedding.0, vec![0.0, 0.0]);

        let p = build_prototypes(&[shot(2, 3), shot(3, 3), shot(4, 3)], &[ClassId(3)], 7).unwrap();
        let want = [(4.0 + 0.0 + 2.0) / 3.0, (0.5 + 3.0 + 2.0) / 3.0];
        for (g, w) in p[0].mean_embedding.0.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert_eq!(p[0].shot_count, 3);

        match build_prototypes(&[shot(0, 7)], &[ClassId(7), ClassId(9)], 7) {
            Err(Error::MissingShots(ClassId(9))) => {}
            other => panic!("expected missing shots for class 9, got {other:?}"),
        }
    }

    #[test]
    fn cosine_examples() {
        let s = cosine_scores(&Embedding(vec![0.3, -2.0]), &[proto(0, vec![0.3, -2.0])], 1.0).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        let s = cosine_scores(&Embedding(vec![1.0, 0.0]), &[proto(0, vec![0.0, 5.0])], 1.0).unwrap();
        assert_eq!(s[0], 0.0);
        let s = cosine_scores(&Embedding(vec![1.0, 0.0]), &[proto(0, vec![1.0, 1.0])], 2.0).unwrap();
        assert!((s[0] - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_errors() {
        assert!(matches!(
            cosine_scores(&Embedding(vec![0.0, 0.0]), &[proto(0, vec![1.0, 0.0])], 1.0),
            Err(Error::ZeroNorm("embedding"))
        ));
        assert!(matches!(
            cosine_scores(&Embedding(vec![1.0, 0.0]), &[proto(0, vec![0.0, 0.0])], 1.0),
            Err(Error::ZeroNorm("prototype"))
        ));
    }

    fn arb_map() -> impl Strategy<Value = FeatureMap> {
        (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(h, w, c)| {
            prop::collection::vec(-5.0f32..5.0, h * w * c)
                .prop_map(move |d| FeatureMap::new(h, w, c, 1.0, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn roi_pool_invariant_under_joint_scaling(
            m in arb_map(),
            (x, y, w, h) in (0.0..4.0f64, 0.0..4.0f64, 0.2..4.0f64, 0.2..4.0f64),
            scale in 0.25..8.0f64,
        ) {
            let b = bx(x, y, x + w, y + h);
            prop_assume!(roi_pool(&m, &b, 3).is_ok());
            let base = roi_pool(&m, &b, 3).unwrap();
            let scaled_map = FeatureMap::new(
                m.height(), m.width(), m.channels(),
                (f64::from(m.stride()) * scale) as f32,
                m.data().to_vec(),
            ).unwrap();
            let real_scale = f64::from(scaled_map.stride()) / f64::from(m.stride());
            let got = roi_pool(&scaled_map, &b.scaled(real_scale).unwrap(), 3).unwrap();
            for (a, c) in base.0.iter().zip(&got.0) {
                prop_assert!((a - c).abs() < 1e-6);
            }
        }

        #[test]
        fn cosine_invariant_to_positive_rescaling(
            e in prop::collection::vec(-3.0..3.0f64, 4),
            p in prop::collection::vec(-3.0..3.0f64, 4),
            lambda in 1e-3..1e3f64,
        ) {
            let e = Embedding(e);
            prop_assume!(e.norm() > 1e-6);
            let protos = [proto(0, p)];
            prop_assume!(protos[0].mean_embedding.norm() > 1e-6);
            let a = cosine_scores(&e, &protos, 1.0).unwrap();
            let b = cosine_scores(&Embedding(e.0.iter().map(|v| v * lambda).collect()), &protos, 1.0).unwrap();
            prop_assert!((a[0] - b[0]).abs() < 1e-9);
        }

        #[test]
        fn prototype_mean_is_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-1e3..1e3f64, 3), 1..12),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let embs: Vec<Embedding> = rows.into_iter().map(Embedding).collect();
            let mut shuffled = embs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = mean_embedding(&embs).unwrap();
            let b = mean_embedding(&shuffled).unwrap();
            prop_assert_eq!(
                a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
