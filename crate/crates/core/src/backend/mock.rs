use std::collections::HashMap;
use std::sync::Mutex;

use super::{Backend, BackendError, BackendRequest, BackendResponse, CacheKey};
use crate::validator::original_of_repair;

/// Replays canned responses from a fixture.
///
/// The fixture is a JSON object mapping either a prompt or a hex cache key
/// to a list of responses. Successive calls for the same entry return
/// successive responses; the last one repeats. Repair prompts resolve to
/// the entry of the prompt they repair, so `["bad", "good"]` scripts a
/// failed first answer followed by a successful repair.
#[derive(Debug, Default)]
pub struct MockBackend {
    entries: HashMap<String, Vec<String>>,
    cursors: Mutex<HashMap<String, usize>>,
}

impl MockBackend {
    pub fn new(entries: HashMap<String, Vec<String>>) -> Result<Self, BackendError> {
        if let Some((k, _)) = entries.iter().find(|(_, v)| v.is_empty()) {
            return Err(BackendError::MalformedFixture(format!(
                "entry {k:?} has no responses"
            )));
        }
        Ok(Self {
            entries,
            cursors: Mutex::new(HashMap::new()),
        })
    }

    pub fn from_fixture(document: &str) -> Result<Self, BackendError> {
        let entries: HashMap<String, Vec<String>> = serde_json::from_str(document)
            .map_err(|e| BackendError::MalformedFixture(e.to_string()))?;
        Self::new(entries)
    }

    fn resolve(&self, request: &BackendRequest) -> Option<&String> {
        let by_prompt_or_key = |prompt: &str| {
            if self.entries.contains_key(prompt) {
                return self.entries.get_key_value(prompt).map(|(k, _)| k);
            }
            let mut probe = request.clone();
            probe.prompt = prompt.to_string();
            let hex = CacheKey::of(&probe).to_hex();
            self.entries.get_key_value(&hex).map(|(k, _)| k)
        };
        by_prompt_or_key(&request.prompt)
            .or_else(|| original_of_repair(&request.prompt).and_then(by_prompt_or_key))
    }
}

impl Backend for MockBackend {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        request.validate()?;
        let key = self.resolve(request).ok_or(BackendError::FixtureMiss {
            key: request.cache_key(),
        })?;
        let responses = &self.entries[key];
        let idx = {
            let mut cursors = self.cursors.lock().expect("mock cursor lock");
            let cursor = cursors.entry(key.clone()).or_insert(0);
            let idx = (*cursor).min(responses.len() - 1);
            *cursor += 1;
            idx
        };
        Ok(BackendResponse::text(responses[idx].clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::validator::{check, repair_prompt, CheckOutcome, OutputContract};

    #[test]
    fn replays_and_repeats_last() {
        let mock = MockBackend::from_fixture(r#"{"P": ["2021-01-02", "20210102"]}"#).unwrap();
        let req = BackendRequest::new("m", "P");
        assert_eq!(mock.complete(&req).unwrap().text, "2021-01-02");
        assert_eq!(mock.complete(&req).unwrap().text, "20210102");
        assert_eq!(mock.complete(&req).unwrap().text, "20210102");
    }

    #[test]
    fn repair_prompt_advances_original_entry() {
        let mock = MockBackend::from_fixture(r#"{"P": ["2021-01-02", "20210102"]}"#).unwrap();
        let req = BackendRequest::new("m", "P");
        let first = mock.complete(&req).unwrap().text;
        let CheckOutcome::Violation(v) = check(&OutputContract::DateYyyymmdd, &first) else {
            panic!("first answer should be malformed");
        };
        let repaired = BackendRequest::new("m", repair_prompt("P", &v, 1));
        assert_eq!(mock.complete(&repaired).unwrap().text, "20210102");
    }

    #[test]
    fn lookup_by_cache_key() {
        let req = BackendRequest::new("m", "some prompt");
        let doc = format!(r#"{{"{}": ["ok"]}}"#, req.cache_key().to_hex());
        let mock = MockBackend::from_fixture(&doc).unwrap();
        assert_eq!(mock.complete(&req).unwrap().text, "ok");
    }

    #[test]
    fn misses_and_malformed() {
        let mock = MockBackend::from_fixture("{}").unwrap();
        let req = BackendRequest::new("m", "P");
        match mock.complete(&req) {
            Err(BackendError::FixtureMiss { key }) => assert_eq!(key, req.cache_key()),
            other => panic!("unexpected {other:?}"),
        }
        assert!(MockBackend::from_fixture("[1,2]").is_err());
        assert!(MockBackend::from_fixture(r#"{"P": []}"#).is_err());
    }
}
