#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use amk_core::backend::{self, GatedBackend};
use amk_core::toy::{ToyBackend, ToyModelSpec};
use amk_tree::{Runtime, Tree, TreeSettings};

pub fn runtime() -> Runtime {
    Runtime::new(GatedBackend::new(Arc::new(ToyBackend::new(ToyModelSpec::default()))))
}

pub fn settings() -> TreeSettings {
    TreeSettings {
        steps: 6,
        sar_cluster_size: 2,
        ..TreeSettings::default()
    }
}

pub fn portrait(dir: &Path) -> PathBuf {
    let toy = ToyBackend::new(ToyModelSpec::default());
    let p = dir.join("input.png");
    std::fs::write(&p, backend::png_bytes(&toy.sample_portrait(0)).unwrap()).unwrap();
    p
}

pub fn new_tree(root: &Path) -> Tree {
    let input = portrait(root);
    Tree::create(&root.join("tree"), &input, "man", 30.0, "toy", settings()).unwrap()
}
