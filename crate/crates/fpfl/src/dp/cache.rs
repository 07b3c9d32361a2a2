//! Small on-disk cache for calibration results, keyed by
//! (population, cohort, epsilon, delta, iterations).

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::Result;

pub type CalibrationCache = BTreeMap<String, f64>;

pub fn cache_key(
    population: usize,
    cohort: usize,
    epsilon: f64,
    delta: f64,
    iterations: usize,
) -> String {
    format!("K={population};m={cohort};eps={epsilon:e};delta={delta:e};T={iterations}")
}

pub fn load_cache(path: &Path) -> Result<CalibrationCache> {
    if !path.exists() {
        return Ok(CalibrationCache::new());
    }
    let text = std::fs::read_to_string(path)?;
    let cache = serde_json::from_str(&text)?;
    Ok(cache)
}

pub fn store_cache(path: &Path, cache: &CalibrationCache) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, serde_json::to_string_pretty(cache)?)?;
    Ok(())
}

/// Look up a cached noise multiplier or calibrate and persist it.
pub fn calibrate_cached(
    path: Option<&Path>,
    population: usize,
    cohort: usize,
    epsilon: f64,
    delta: f64,
    iterations: usize,
) -> Result<f64> {
    let key = cache_key(population, cohort, epsilon, delta, iterations);
    let mut cache = match path {
        Some(p) => load_cache(p).unwrap_or_default(),
        None => CalibrationCache::new(),
    };
    if let Some(&sigma) = cache.get(&key) {
        return Ok(sigma);
    }
    let sigma = super::calibrate_noise(population, cohort, epsilon, delta, iterations)?;
    if let Some(p) = path {
        cache.insert(key, sigma);
        store_cache(p, &cache)?;
    }
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_round_trip_skips_recalibration() {
        let dir = std::env::temp_dir().join("fpfl-dp-cache-test");
        let _ = std::fs::remove_dir_all(&dir);
        let path = dir.join("cache.json");
        let a = calibrate_cached(Some(&path), 10_000, 500, 2.0, 1e-5, 50).unwrap();
        let cache = load_cache(&path).unwrap();
        assert_eq!(cache.len(), 1);
        let b = calibrate_cached(Some(&path), 10_000, 500, 2.0, 1e-5, 50).unwrap();
        assert_eq!(a, b);
        let _ = std::fs::remove_dir_all(&dir);
    }
}
