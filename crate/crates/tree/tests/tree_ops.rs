mod common;

use std::fs;

use amk_core::pipeline::Preset;
use amk_tree::tree::render_ascii;
use amk_tree::{BranchRequest, JobState, Overrides, Tree, TreeError, TreeManifest};
use common::{new_tree, portrait, runtime, settings};

fn req(parent: &str, condition: &str, age: f64) -> BranchRequest {
    BranchRequest {
        parent_id: parent.into(),
        condition: condition.into(),
        age_target: age,
        overrides: None,
    }
}

#[test]
fn create_writes_single_root_and_refuses_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let tree = new_tree(tmp.path());
    let m = tree.manifest();
    assert_eq!(m.nodes.len(), 1);
    assert!(m.nodes[0].parent_id.is_none());
    assert_eq!(m.nodes[0].age, 30.0);
    assert!(tmp.path().join("tree/images/root.png").exists());
    assert_eq!(TreeManifest::load(tree.dir()).unwrap(), m);
    let again = Tree::create(tree.dir(), &portrait(tmp.path()), "man", 30.0, "toy", settings());
    assert!(matches!(again, Err(TreeError::AlreadyExists(_))));
}

#[test]
fn create_rejects_unreadable_image() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("x.png");
    fs::write(&bad, b"not a png").unwrap();
    assert!(matches!(
        Tree::create(&tmp.path().join("t"), &bad, "man", 30.0, "toy", settings()),
        Err(TreeError::Io(_))
    ));
}

#[test]
fn branch_completes_and_reuses_parent_inversion() {
    let tmp = tempfile::tempdir().unwrap();
    let tree = new_tree(tmp.path());
    let rt = runtime();
    let a = tree.grow_branch(&req("root", "hair loss", 60.0), &rt).unwrap();
    let m = tree.manifest();
    let node = m.node(&a).unwrap();
    assert_eq!(node.job_state, JobState::Done, "{:?}", node.error);
    assert!(node.refined_prompt.contains("60"));
    assert_eq!(node.sar_weight, Some(0.75));
    assert!(tree.dir().join(&node.image_ref).exists());

    let feats = tree.dir().join("features/root");
    let inv: Vec<_> = fs::read_dir(&feats).unwrap().map(|e| e.unwrap().path()).collect();
    let stamp = |p: &std::path::Path| fs::metadata(p.join("manifest.json")).unwrap().modified().unwrap();
    let before: Vec<_> = inv.iter().map(|p| stamp(p)).collect();
    let b = tree.grow_branch(&req("root", "alcoholism", 60.0), &rt).unwrap();
    let after: Vec<_> = inv.iter().map(|p| stamp(p)).collect();
    assert_eq!(before, after);
    assert_eq!(fs::read_dir(&feats).unwrap().count(), inv.len());

    let img = |id: &str| fs::read(tree.image_path(id).unwrap()).unwrap();
    assert_ne!(img(&a), img(&b));
}

#[test]
fn branches_are_deterministic_across_trees() {
    let run = || {
        let tmp = tempfile::tempdir().unwrap();
        let tree = new_tree(tmp.path());
        let id = tree.grow_branch(&req("root", "poor skin care", 70.0), &runtime()).unwrap();
        fs::read(tree.image_path(&id).unwrap()).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn compounding_and_from_root() {
    let tmp = tempfile::tempdir().unwrap();
    let tree = new_tree(tmp.path());
    let rt = runtime();
    let a = tree.grow_branch(&req("root", "gain weight", 50.0), &rt).unwrap();
    let b = tree.grow_branch(&req(&a, "hair loss", 70.0), &rt).unwrap();
    assert!(tree.dir().join("features").join(&a).exists());
    let mut r = req(&a, "hair loss", 70.0);
    r.overrides = Some(Overrides {
        from_root: Some(true),
        ..Default::default()
    });
    let c = tree.grow_branch(&r, &rt).unwrap();
    let m = tree.manifest();
    assert_eq!(m.node(&c).unwrap().parent_id.as_deref(), Some(a.as_str()));
    assert_eq!(m.node(&c).unwrap().job_state, JobState::Done);
    let img = |id: &str| fs::read(tree.image_path(id).unwrap()).unwrap();
    assert_ne!(img(&b), img(&c));
    let text = render_ascii(&m);
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("root [done] age 30 input"));
}

#[test]
fn request_validation() {
    let tmp = tempfile::tempdir().unwrap();
    let tree = new_tree(tmp.path());
    assert!(matches!(tree.enqueue_branch(&req("root", "", 19.0)), Err(TreeError::Validation(_))));
    assert!(matches!(tree.enqueue_branch(&req("root", "", 91.0)), Err(TreeError::Validation(_))));
    assert!(matches!(tree.enqueue_branch(&req("nope", "", 40.0)), Err(TreeError::NotFound(_))));
    let (_, pending) = tree.enqueue_branch(&req("root", "", 40.0)).unwrap();
    assert!(matches!(
        tree.enqueue_branch(&req(&pending, "", 50.0)),
        Err(TreeError::ParentNotReady { state: JobState::Pending, .. })
    ));
}

#[test]
fn failed_parent_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let input = portrait(tmp.path());
    // A tree recorded against another backend fails at generation time.
    let tree = Tree::create(&tmp.path().join("t"), &input, "man", 30.0, "flux", settings()).unwrap();
    let id = tree.grow_branch(&req("root", "", 60.0), &runtime()).unwrap();
    let m = tree.manifest();
    let n = m.node(&id).unwrap();
    assert_eq!(n.job_state, JobState::Failed);
    assert!(n.error.as_deref().unwrap().contains("flux"));
    assert!(tree.image_path(&id).is_none());
    assert!(matches!(
        tree.enqueue_branch(&req(&id, "", 70.0)),
        Err(TreeError::ParentNotReady { state: JobState::Failed, .. })
    ));
}

#[test]
fn preset_override_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let tree = new_tree(tmp.path());
    let mut r = req("root", "", 60.0);
    r.overrides = Some(Overrides {
        preset: Some(Preset::ReplaceV),
        g: Some(0.5),
        from_root: None,
    });
    let id = tree.grow_branch(&r, &runtime()).unwrap();
    let m = tree.manifest();
    let n = m.node(&id).unwrap();
    assert_eq!(n.options.as_ref().unwrap().preset, Preset::ReplaceV);
    assert_eq!(n.sar_weight, None);
}

#[test]
fn delete_prunes_subtree_unless_running() {
    let tmp = tempfile::tempdir().unwrap();
    let tree = new_tree(tmp.path());
    let rt = runtime();
    let a = tree.grow_branch(&req("root", "", 50.0), &rt).unwrap();
    let b = tree.grow_branch(&req(&a, "", 60.0), &rt).unwrap();
    let (_, c) = tree.enqueue_branch(&req(&b, "", 70.0)).unwrap();
    tree.update_with_fault(None, |m| {
        m.node_mut(&c).unwrap().job_state = JobState::Running;
        Ok(())
    })
    .unwrap();
    assert!(matches!(tree.delete_subtree(&a), Err(TreeError::Busy(_))));
    tree.update_with_fault(None, |m| {
        m.node_mut(&c).unwrap().job_state = JobState::Failed;
        Ok(())
    })
    .unwrap();
    let removed = tree.delete_subtree(&a).unwrap();
    assert_eq!(removed, [a.clone(), b.clone(), c]);
    assert_eq!(tree.manifest().nodes.len(), 1);
    assert!(!tree.dir().join(format!("images/{a}.png")).exists());
    assert!(matches!(tree.delete_subtree("root"), Err(TreeError::Validation(_))));
}

#[test]
fn reopen_requeues_pending_and_fails_running() {
    let tmp = tempfile::tempdir().unwrap();
    let tree = new_tree(tmp.path());
    let (_, p) = tree.enqueue_branch(&req("root", "", 50.0)).unwrap();
    let (_, r) = tree.enqueue_branch(&req("root", "", 60.0)).unwrap();
    tree.update_with_fault(None, |m| {
        m.node_mut(&r).unwrap().job_state = JobState::Running;
        Ok(())
    })
    .unwrap();
    let dir = tree.dir().to_path_buf();
    drop(tree);
    let (tree, pending) = Tree::open(&dir).unwrap();
    assert_eq!(pending, [p.as_str()]);
    let m = tree.manifest();
    assert_eq!(m.node(&r).unwrap().job_state, JobState::Failed);
    assert_eq!(TreeManifest::load(&dir).unwrap(), m);
    assert_eq!(tree.run_job(&p, &runtime()).unwrap(), Some(JobState::Done));
    assert_eq!(tree.run_job(&p, &runtime()).unwrap(), None);
}
