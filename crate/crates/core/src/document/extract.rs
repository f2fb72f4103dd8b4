use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};

use thiserror::Error;

use crate::cache::sha256_hex;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("text extraction failed: {0}")]
pub struct ExtractionFailed(pub String);

/// Turns PDF bytes into reading-order text.
pub trait TextExtractor: Send + Sync {
    fn extract(&self, pdf: &[u8]) -> Result<String, ExtractionFailed>;
}

/// Pipes the PDF to an external program's stdin and reads text from stdout.
/// The default invocation is `pdftotext -layout - -`.
#[derive(Debug, Clone)]
pub struct CommandExtractor {
    program: String,
    args: Vec<String>,
}

impl Default for CommandExtractor {
    fn default() -> Self {
        Self::new("pdftotext", ["-layout", "-", "-"])
    }
}

impl CommandExtractor {
    pub fn new<I, S>(program: impl Into<String>, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            program: program.into(),
            args: args.into_iter().map(Into::into).collect(),
        }
    }
}

impl TextExtractor for CommandExtractor {
    fn extract(&self, pdf: &[u8]) -> Result<String, ExtractionFailed> {
        if pdf.is_empty() {
            return Err(ExtractionFailed("empty input".into()));
        }
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| ExtractionFailed(format!("cannot start {}: {e}", self.program)))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let input = pdf.to_vec();
        // Feed stdin from another thread so a chatty child cannot deadlock us.
        let writer = std::thread::spawn(move || stdin.write_all(&input));
        let output = child
            .wait_with_output()
            .map_err(|e| ExtractionFailed(e.to_string()))?;
        let _ = writer.join();
        if !output.status.success() {
            return Err(ExtractionFailed(format!(
                "{} exited with {}: {}",
                self.program,
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let text = String::from_utf8_lossy(&output.stdout).into_owned();
        if text.trim().is_empty() {
            return Err(ExtractionFailed("no text layer".into()));
        }
        Ok(text)
    }
}

/// Replays previously extracted text keyed by the SHA-256 of the PDF bytes.
#[derive(Debug, Clone, Default)]
pub struct FixtureExtractor {
    by_hash: HashMap<String, String>,
}

impl FixtureExtractor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, pdf: &[u8], text: impl Into<String>) {
        self.by_hash.insert(sha256_hex(pdf), text.into());
    }

    /// Loads every `<sha256>.txt` file in `dir`.
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let mut by_hash = HashMap::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("txt") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    by_hash.insert(stem.to_ascii_lowercase(), std::fs::read_to_string(&path)?);
                }
            }
        }
        Ok(Self { by_hash })
    }
}

impl TextExtractor for FixtureExtractor {
    fn extract(&self, pdf: &[u8]) -> Result<String, ExtractionFailed> {
        if pdf.is_empty() {
            return Err(ExtractionFailed("empty input".into()));
        }
        self.by_hash
            .get(&sha256_hex(pdf))
            .cloned()
            .ok_or_else(|| ExtractionFailed("no fixture for this document".into()))
    }
}
