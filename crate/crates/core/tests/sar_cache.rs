use std::fs;

use amk_core::backend;
use amk_core::sar::{self, ClusterProvider, ClusterSource, MockAgingService};
use amk_core::toy::{ToyBackend, ToyModelSpec};

#[test]
fn external_clusters_are_fetched_once() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = ToyBackend::new(ToyModelSpec::default());
    let input = tmp.path().join("in.png");
    fs::write(&input, backend::png_bytes(&toy.sample_portrait(2)).unwrap()).unwrap();
    let cache = tmp.path().join("cache");

    let first = MockAgingService::new();
    let provider = ClusterProvider::External { service: &first, seed: 5, retries: 2 };
    let a = sar::build_clusters(&input, &[30.0, 70.0], 3, &provider, &cache).unwrap();
    assert_eq!(first.requests(), 6);
    assert!(a.iter().all(|c| c.source == ClusterSource::ExternalService));

    let second = MockAgingService::new();
    let provider = ClusterProvider::External { service: &second, seed: 5, retries: 2 };
    let b = sar::build_clusters(&input, &[30.0, 70.0], 3, &provider, &cache).unwrap();
    assert_eq!(second.requests(), 0);
    assert_eq!(a, b);
}

#[test]
fn failing_age_reports_missing_members() {
    let tmp = tempfile::tempdir().unwrap();
    let toy = ToyBackend::new(ToyModelSpec::default());
    let input = tmp.path().join("in.png");
    fs::write(&input, backend::png_bytes(&toy.sample_portrait(2)).unwrap()).unwrap();
    let svc = MockAgingService::failing_age(70.0);
    let provider = ClusterProvider::External { service: &svc, seed: 0, retries: 1 };
    let err = sar::build_clusters(&input, &[30.0, 70.0], 2, &provider, tmp.path()).unwrap_err();
    match err {
        sar::SarError::MissingMembers { missing, .. } => assert!(missing.iter().all(|(age, _)| *age == 70.0)),
        other => panic!("unexpected {other}"),
    }
}
