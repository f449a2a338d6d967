//! Single-file JSON store for sessions and job records, plus a
//! content-addressed image directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use forge_core::image::ImageGrid;
use forge_core::ForgeError;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::{Result, ServiceError};
use crate::jobs::JobRecord;
use crate::session::Session;

const STORE_FILE: &str = "store.json";
const STORE_VERSION: u32 = 1;

#[derive(Debug, Default, Serialize, Deserialize)]
struct Db {
    version: u32,
    sessions: BTreeMap<Uuid, Session>,
    jobs: BTreeMap<Uuid, JobRecord>,
}

pub struct Store {
    root: PathBuf,
    db: Mutex<Db>,
}

impl Store {
    /// Opens (or creates) the store under `root`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("images")).map_err(ForgeError::from)?;
        let file = root.join(STORE_FILE);
        let db = if file.exists() {
            let bytes = fs::read(&file).map_err(ForgeError::from)?;
            let db: Db = serde_json::from_slice(&bytes).map_err(ForgeError::from)?;
            if db.version != STORE_VERSION {
                return Err(ServiceError::Internal(format!("{} has unsupported version {}", file.display(), db.version)));
            }
            db
        } else {
            Db { version: STORE_VERSION, ..Db::default() }
        };
        Ok(Self { root, db: Mutex::new(db) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn artifacts_dir(&self) -> PathBuf {
        self.root.join("artifacts")
    }

    fn persist(&self, db: &Db) -> Result<()> {
        let tmp = self.root.join(format!("{STORE_FILE}.tmp"));
        let bytes = serde_json::to_vec_pretty(db).map_err(ForgeError::from)?;
        fs::write(&tmp, bytes).map_err(ForgeError::from)?;
        fs::rename(&tmp, self.root.join(STORE_FILE)).map_err(ForgeError::from)?;
        Ok(())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Db> {
        self.db.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Stores an 8-bit-exact image under its content hash.
    pub fn put_image(&self, img: &ImageGrid) -> Result<String> {
        let hash = img.content_hash();
        let path = self.image_path(&hash);
        if !path.exists() {
            let png = img.encode_png()?;
            if ImageGrid::decode(&png)?.content_hash() != hash {
                return Err(ServiceError::BadRequest("image is not representable as 8-bit PNG".into()));
            }
            fs::write(&path, png).map_err(ForgeError::from)?;
        }
        Ok(hash)
    }

    pub fn get_image(&self, hash: &str) -> Result<ImageGrid> {
        let path = self.image_path(hash);
        if !path.exists() {
            return Err(ServiceError::NotFound { what: "image", id: hash.into() });
        }
        Ok(ImageGrid::load(path)?)
    }

    fn image_path(&self, hash: &str) -> PathBuf {
        self.root.join("images").join(format!("{hash}.png"))
    }

    pub fn session(&self, id: Uuid) -> Result<Session> {
        self.lock()
            .sessions
            .get(&id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound { what: "session", id: id.to_string() })
    }

    pub fn put_session(&self, session: Session) -> Result<()> {
        let mut db = self.lock();
        db.sessions.insert(session.id, session);
        self.persist(&db)
    }

    pub fn job(&self, id: Uuid) -> Result<JobRecord> {
        self.lock()
            .jobs
            .get(&id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound { what: "job", id: id.to_string() })
    }

    pub fn jobs(&self) -> Vec<JobRecord> {
        self.lock().jobs.values().cloned().collect()
    }

    pub fn insert_job(&self, job: JobRecord) -> Result<()> {
        let mut db = self.lock();
        db.jobs.insert(job.id, job);
        self.persist(&db)
    }

    /// Applies `f` to a stored job and persists the result.
    pub fn update_job<T>(&self, id: Uuid, f: impl FnOnce(&mut JobRecord) -> Result<T>) -> Result<T> {
        let mut db = self.lock();
        let job = db
            .jobs
            .get_mut(&id)
            .ok_or_else(|| ServiceError::NotFound { what: "job", id: id.to_string() })?;
        let out = f(job)?;
        self.persist(&db)?;
        Ok(out)
    }
}
