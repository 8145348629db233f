mod common;

use common::brute_force_two_means;
use mammopipe::image::GrayImage;
use mammopipe::preprocess::{kmeans_segment, labels_to_gray};
use mammopipe::rng::SplitMix64;
use proptest::prelude::*;

fn six_pixel(rng: &mut SplitMix64) -> GrayImage {
    loop {
        let px: Vec<u16> = (0..6).map(|_| rng.below(256) as u16).collect();
        if px.iter().any(|&p| p != px[0]) {
            return GrayImage::new(3, 2, 255, px).unwrap();
        }
    }
}

#[test]
fn two_means_is_globally_optimal_on_six_pixels() {
    let mut rng = SplitMix64::new(0x6B6D);
    for case in 0..100 {
        let img = six_pixel(&mut rng);
        let res = kmeans_segment(&img, 2, case, 100, 1e-9).unwrap();
        let best = brute_force_two_means(&img.to_f64());
        assert!((res.objective - best).abs() <= 1e-9 * best.max(1.0), "{:?}: {} vs {best}", img.pixels(), res.objective);
        assert!(res.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{:?}", res.objective_trace);
    }
}

proptest! {
    #[test]
    fn labels_are_nearest_centroid(px in prop::collection::vec(0u16..64, 4..40), k in 1usize..4, seed in any::<u64>()) {
        let distinct = { let mut v = px.clone(); v.sort(); v.dedup(); v.len() };
        prop_assume!(distinct >= k);
        let img = GrayImage::new(px.len(), 1, 63, px.clone()).unwrap();
        let res = kmeans_segment(&img, k, seed, 100, 1e-9).unwrap();
        prop_assert!(res.centroids.windows(2).all(|w| w[0] <= w[1]));
        for (&p, &l) in px.iter().zip(&res.labels) {
            let d = (p as f64 - res.centroids[l as usize]).abs();
            prop_assert!(res.centroids.iter().all(|c| d <= (p as f64 - c).abs() + 1e-9));
        }
        prop_assert!(res.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        prop_assert_eq!(labels_to_gray(&res).dims(), img.dims());
    }
}
