//! Single background worker that runs branch jobs in submission order.

use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::tree::{Runtime, Tree};

pub struct Worker {
    tx: Mutex<Option<Sender<String>>>,
    handle: Mutex<Option<JoinHandle<()>>>,
}

impl Worker {
    pub fn spawn(tree: Arc<Tree>, runtime: Arc<Runtime>) -> Worker {
        let (tx, rx) = mpsc::channel::<String>();
        let handle = std::thread::Builder::new()
            .name("amk-branch-worker".into())
            .spawn(move || {
                for id in rx {
                    if let Err(e) = tree.run_job(&id, &runtime) {
                        log::error!("job for node {id} could not be recorded: {e}");
                    }
                }
            })
            .expect("spawn worker thread");
        Worker {
            tx: Mutex::new(Some(tx)),
            handle: Mutex::new(Some(handle)),
        }
    }

    /// Queues the pending node `id`. Ignored after shutdown.
    pub fn submit(&self, id: impl Into<String>) {
        if let Some(tx) = self.tx.lock().unwrap_or_else(|p| p.into_inner()).as_ref() {
            let _ = tx.send(id.into());
        }
    }

    /// Lets queued jobs finish, then stops the thread.
    pub fn shutdown(&self) {
        self.tx.lock().unwrap_or_else(|p| p.into_inner()).take();
        if let Some(h) = self.handle.lock().unwrap_or_else(|p| p.into_inner()).take() {
            let _ = h.join();
        }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.shutdown();
    }
}
