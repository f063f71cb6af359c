//! Inputs shared by the benchmarks.

use hepeval_core::phantom::{degrade, generate_case, Blob, DegradeSpec, PhantomSpec};
use hepeval_core::{BinaryMask, Geometry, LabelSchema, LabelVolume, ProbVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random probabilities and a random mask on an `n`^3 grid.
pub fn random_pair(n: usize, seed: u64) -> (ProbVolume, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Geometry::new([n, n, n], [1.0; 3]).expect("valid grid");
    let p = ProbVolume::new(g.clone(), (0..g.len()).map(|_| rng.gen_range(0.01..0.99)).collect())
        .expect("values in range");
    let m = BinaryMask::from_fn(g, |_| rng.gen_bool(0.3));
    (p, m)
}

/// Default 128^3 phantom and a degraded prediction of it.
pub fn phantom_pair() -> (LabelVolume, LabelVolume) {
    let truth = generate_case(&PhantomSpec::default()).expect("default spec generates");
    let mut d = DegradeSpec {
        seed: 1,
        drop_edge_ids: vec![3],
        spurious_blobs: vec![Blob {
            center: [127.0, 127.0, 160.5],
            radius: 6.0,
            label: LabelSchema::TUMOR,
        }],
        ..DegradeSpec::default()
    };
    d.erode_steps.insert("hepatic_vein".into(), 1);
    let pred = degrade(&truth, &d).expect("valid degradation");
    (truth.labels, pred)
}
