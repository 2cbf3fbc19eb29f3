use std::fs;
use std::path::Path;

use negpos_core::attack::SyntheticOracleParams;
use negpos_core::parse_key;
use serde::Deserialize;

/// JSON file describing a synthetic oracle.
///
/// ```json
/// {"true_key_file": "truth.key", "base_accuracy": 0.001, "top_accuracy": 0.73,
///  "shape_gamma": 1.0, "noise_sigma": 0.0, "noise_seed": "00ff"}
/// ```
///
/// `true_key_file` is resolved relative to the parameter file. Instead of a
/// file, `true_key` may hold the hex of a serialized key.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleParamsFile {
    #[serde(default)]
    pub true_key_file: Option<String>,
    #[serde(default)]
    pub true_key: Option<String>,
    pub base_accuracy: f64,
    pub top_accuracy: f64,
    #[serde(default = "default_gamma")]
    pub shape_gamma: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Hex bytes.
    #[serde(default)]
    pub noise_seed: String,
}

fn default_gamma() -> f64 {
    1.0
}

impl OracleParamsFile {
    pub fn load(path: &Path) -> Result<SyntheticOracleParams, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let file: OracleParamsFile =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let key_bytes = match (&file.true_key_file, &file.true_key) {
            (Some(rel), None) => {
                let key_path = path.parent().unwrap_or(Path::new(".")).join(rel);
                fs::read(&key_path).map_err(|e| format!("{}: {e}", key_path.display()))?
            }
            (None, Some(hex_key)) => hex::decode(hex_key.trim()).map_err(|e| format!("true_key: {e}"))?,
            _ => return Err(format!("{}: set exactly one of true_key_file and true_key", path.display())),
        };
        let true_key = parse_key(&key_bytes).map_err(|e| format!("true key: {e}"))?;
        let noise_seed = hex::decode(file.noise_seed.trim()).map_err(|e| format!("noise_seed: {e}"))?;
        let params = SyntheticOracleParams {
            true_key,
            base_accuracy: file.base_accuracy,
            top_accuracy: file.top_accuracy,
            shape_gamma: file.shape_gamma,
            noise_sigma: file.noise_sigma,
            noise_seed,
        };
        params.validate().map_err(|e| e.to_string())?;
        Ok(params)
    }
}
