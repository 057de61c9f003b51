//! On-disk session store.
//!
//! ```text
//! <root>/<session>/session.json       metadata and history
//! <root>/<session>/source.png
//! <root>/<session>/cache/             inversion, FS code and bald proxy
//! <root>/<session>/results/<job>.*    image, report, request, partial image
//! ```
//!
//! Latents and features are stored as f32, so a session restored after a
//! restart carries f32-rounded codes.

use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use hairproxy_core::io::{self, LatentFile};
use hairproxy_core::{EditReport, Image, LatentFS, Proxy, ProxyKind, RecipeFile, SourceState};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum HistoryOutcome {
    Done,
    Failed { stage: String, message: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub job_id: String,
    pub completed_unix_s: u64,
    #[serde(flatten)]
    pub outcome: HistoryOutcome,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub seed: u64,
    pub created_unix_s: u64,
    /// Completed jobs in completion order. Append-only.
    pub history: Vec<HistoryEntry>,
}

pub fn now_unix_s() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn new_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

/// Ids are generated hex; anything else never names a stored session.
pub fn valid_id(id: &str) -> bool {
    id.len() == 32 && id.bytes().all(|b| b.is_ascii_hexdigit())
}

#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
    ttl: Duration,
}

impl Store {
    pub fn open(root: &Path, ttl: Duration) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(Store {
            root: root.to_path_buf(),
            ttl,
        })
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    pub fn expired(&self, meta: &SessionMeta, now: u64) -> bool {
        now.saturating_sub(meta.created_unix_s) >= self.ttl.as_secs()
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    fn result_path(&self, session: &str, job: &str, ext: &str) -> PathBuf {
        self.dir(session)
            .join("results")
            .join(format!("{job}.{ext}"))
    }

    pub fn create(&self, meta: &SessionMeta, image: &Image) -> Result<()> {
        std::fs::create_dir_all(self.dir(&meta.id).join("results"))?;
        io::save_image(&self.dir(&meta.id).join("source.png"), image)?;
        self.write_meta(meta)
    }

    pub fn write_meta(&self, meta: &SessionMeta) -> Result<()> {
        let dir = self.dir(&meta.id);
        let tmp = dir.join("session.json.tmp");
        let text = serde_json::to_string_pretty(meta)?;
        io::save_text(&tmp, &text)?;
        std::fs::rename(&tmp, dir.join("session.json"))?;
        Ok(())
    }

    pub fn remove(&self, id: &str) {
        if let Err(e) = std::fs::remove_dir_all(self.dir(id)) {
            log::warn!("removing session {id}: {e}");
        }
    }

    /// Every stored session with its source image and cached state, if any.
    pub fn scan(&self) -> Result<Vec<(SessionMeta, Image, Option<SourceState>)>> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&self.root)? {
            let path = entry?.path();
            let Some(id) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if !valid_id(id) || !path.join("session.json").is_file() {
                continue;
            }
            match self.load_one(&path) {
                Ok(item) => out.push(item),
                Err(e) => log::warn!("skipping unreadable session {id}: {e}"),
            }
        }
        Ok(out)
    }

    fn load_one(&self, dir: &Path) -> Result<(SessionMeta, Image, Option<SourceState>)> {
        let meta: SessionMeta = serde_json::from_str(&io::load_text(&dir.join("session.json"))?)?;
        let image = io::load_image(&dir.join("source.png"))?;
        let cache = if dir.join("cache").join("report.json").is_file() {
            Some(self.load_source(dir, &image)?)
        } else {
            None
        };
        Ok((meta, image, cache))
    }

    pub fn save_source(&self, id: &str, src: &SourceState) -> Result<()> {
        let cache = self.dir(id).join("cache");
        std::fs::create_dir_all(&cache)?;
        io::save_latent(
            &cache.join("source.hplt"),
            &LatentFile {
                w: src.w_src.clone(),
                fs: Some(LatentFS::new(src.f_src.clone(), src.w_src.slice(8, 18))?),
            },
        )?;
        let w_bald = src.bald.w.clone().unwrap_or_else(|| src.w_src.clone());
        io::save_latent(
            &cache.join("bald.hplt"),
            &LatentFile {
                fs: Some(LatentFS::new(src.f_bald().clone(), w_bald.slice(8, 18))?),
                w: w_bald,
            },
        )?;
        io::save_mask(&cache.join("bald_region.png"), src.m_bald())?;
        // Written last: its presence marks a complete cache.
        let report = serde_json::to_string_pretty(&src.report)?;
        Ok(io::save_text(&cache.join("report.json"), &report)?)
    }

    fn load_source(&self, dir: &Path, image: &Image) -> Result<SourceState> {
        let cache = dir.join("cache");
        let src = io::load_latent(&cache.join("source.hplt"))?;
        let bald = io::load_latent(&cache.join("bald.hplt"))?;
        let missing = || Error::Corrupt("cached latent lacks its FS block".into());
        let report: EditReport = serde_json::from_str(&io::load_text(&cache.join("report.json"))?)?;
        Ok(SourceState {
            image: image.clone(),
            w_src: src.w,
            f_src: src.fs.ok_or_else(missing)?.f7,
            bald: Proxy {
                kind: ProxyKind::Bald,
                w: Some(bald.w),
                f_style: Some(bald.fs.ok_or_else(missing)?.f7),
                region: io::load_mask(&cache.join("bald_region.png"))?,
                optim: None,
            },
            report,
        })
    }

    pub fn save_result(
        &self,
        session: &str,
        job: &str,
        png: &[u8],
        report: &EditReport,
    ) -> Result<()> {
        io::save_bytes(&self.result_path(session, job, "png"), png)?;
        let text = serde_json::to_string_pretty(report)?;
        Ok(io::save_text(
            &self.result_path(session, job, "report.json"),
            &text,
        )?)
    }

    pub fn save_partial(&self, session: &str, job: &str, png: &[u8]) -> Result<()> {
        Ok(io::save_bytes(
            &self.result_path(session, job, "partial.png"),
            png,
        )?)
    }

    pub fn save_request(&self, session: &str, job: &str, recipe: &RecipeFile) -> Result<()> {
        Ok(io::save_text(
            &self.result_path(session, job, "request.json"),
            &recipe.to_json()?,
        )?)
    }

    pub fn load_result_png(&self, session: &str, job: &str) -> Result<Vec<u8>> {
        Ok(io::load_bytes(&self.result_path(session, job, "png"))?)
    }

    pub fn load_partial_png(&self, session: &str, job: &str) -> Result<Vec<u8>> {
        Ok(io::load_bytes(&self.result_path(
            session,
            job,
            "partial.png",
        ))?)
    }

    pub fn load_report(&self, session: &str, job: &str) -> Result<EditReport> {
        let text = io::load_text(&self.result_path(session, job, "report.json"))?;
        Ok(serde_json::from_str(&text)?)
    }
}
