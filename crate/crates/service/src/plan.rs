//! Building the pair plan a service presents.

use std::path::Path;

use indexmap::IndexMap;
use prefnet::dataset::{build_pairs, PairPlan, Volume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, ServiceError};

/// Splits `<song>__<device>__<volume>.wav` into its parts.
pub fn parse_clip_name(name: &str) -> Option<(String, String, Volume)> {
    let stem = name.strip_suffix(".wav")?;
    let mut parts = stem.split("__");
    let (song, device, volume) = (parts.next()?, parts.next()?, parts.next()?);
    if parts.next().is_some() || song.is_empty() || device.is_empty() {
        return None;
    }
    Some((song.to_string(), device.to_string(), volume.parse().ok()?))
}

/// Pairs every WAV in `dir` that follows the clip naming scheme. Files are
/// grouped by (song, volume) in sorted name order, so the plan depends only
/// on the file names and `seed`.
pub fn plan_from_audio_dir(dir: &Path, seed: u64) -> Result<PairPlan> {
    let read = std::fs::read_dir(dir)
        .map_err(|e| ServiceError::invalid(format!("audio dir {}: {e}", dir.display()), vec!["audio_dir".into()]))?;
    let mut names: Vec<String> = read
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".wav"))
        .collect();
    names.sort();
    let mut groups: IndexMap<(String, Volume), Vec<String>> = IndexMap::new();
    for name in names {
        match parse_clip_name(&name) {
            Some((song, _, volume)) => groups.entry((song, volume)).or_default().push(name),
            None => {
                return Err(ServiceError::invalid(
                    format!("{name} does not match <song>__<device>__<volume>.wav"),
                    vec!["audio_dir".into()],
                ))
            }
        }
    }
    let devices = groups
        .values()
        .next()
        .map(Vec::len)
        .ok_or_else(|| ServiceError::invalid(format!("no clips in {}", dir.display()), vec!["audio_dir".into()]))?;
    Ok(build_pairs(&groups, devices, &mut ChaCha8Rng::seed_from_u64(seed))?)
}

/// Reads a plan saved as JSON.
pub fn load_plan(path: &Path) -> Result<PairPlan> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ServiceError::invalid(format!("{}: {e}", path.display()), vec!["plan".into()]))?;
    serde_json::from_str(&text)
        .map_err(|e| ServiceError::invalid(format!("{}: {e}", path.display()), vec!["plan".into()]))
}
