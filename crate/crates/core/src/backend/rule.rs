use std::collections::HashMap;

use super::{Backend, BackendError, BackendRequest, BackendResponse};
use crate::oracle::{self, OracleError, OracleTag, Taxonomy};
use crate::table::{format_real, format_vector};

pub const UNVERIFIED_NOTE: &str = "unverified";
pub const BUILTIN_TAXONOMY_ID: &str = "retail";

/// Answers by running the request's oracle on its structured inputs.
///
/// Oracle failures come back in-band as `ERROR: <message>` so they flow
/// through the same validation path as any other bad answer.
#[derive(Debug, Clone)]
pub struct RuleBackend {
    taxonomies: HashMap<String, Taxonomy>,
}

impl Default for RuleBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl RuleBackend {
    /// Rule backend with the built-in `retail` taxonomy registered.
    pub fn new() -> Self {
        let mut taxonomies = HashMap::new();
        taxonomies.insert(BUILTIN_TAXONOMY_ID.to_string(), oracle::builtin_taxonomy());
        Self { taxonomies }
    }

    pub fn with_taxonomy(mut self, id: impl Into<String>, taxonomy: Taxonomy) -> Self {
        self.taxonomies.insert(id.into(), taxonomy);
        self
    }

    fn run(&self, tag: OracleTag, request: &BackendRequest) -> Result<(String, Vec<String>), OracleError> {
        let input = |i: usize| -> Result<&str, OracleError> {
            request
                .structured_inputs
                .get(i)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| OracleError::BadParam {
                    name: format!("input {i}"),
                    message: "missing".into(),
                })
        };
        let param = |name: &str| -> Result<&str, OracleError> {
            request
                .params
                .get(name)
                .map(String::as_str)
                .ok_or_else(|| OracleError::BadParam {
                    name: name.into(),
                    message: "missing".into(),
                })
        };
        let real_param = |name: &str| -> Result<f64, OracleError> {
            let raw = param(name)?;
            raw.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| OracleError::BadParam {
                    name: name.into(),
                    message: format!("{raw:?} is not a number"),
                })
        };

        let text = match tag {
            OracleTag::DateNormalize => oracle::date_normalize(input(0)?)?,
            OracleTag::ToUnixEpoch => oracle::to_unix_epoch(input(0)?)?.to_string(),
            OracleTag::NormalizeRating => {
                let raw = input(0)?;
                let x = raw
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| OracleError::NotANumber(raw.to_string()))?;
                format_real(oracle::normalize_rating(x, real_param("lo")?, real_param("hi")?)?)
            }
            OracleTag::ClassifyItemType => {
                let id = param("taxonomy")?;
                let taxonomy = self.taxonomies.get(id).ok_or_else(|| OracleError::BadParam {
                    name: "taxonomy".into(),
                    message: format!("no taxonomy registered as {id:?}"),
                })?;
                let c = oracle::classify_item_type(input(0)?, input(1)?, taxonomy)?;
                let notes = if c.unverified {
                    vec![UNVERIFIED_NOTE.to_string()]
                } else {
                    Vec::new()
                };
                return Ok((c.item_type, notes));
            }
            OracleTag::EmbedText => {
                let raw = param("dim")?;
                let dim = raw.trim().parse::<usize>().map_err(|_| OracleError::BadParam {
                    name: "dim".into(),
                    message: format!("{raw:?} is not a positive integer"),
                })?;
                format_vector(&oracle::embed_text(input(0)?, dim)?)
            }
        };
        Ok((text, Vec::new()))
    }
}

impl Backend for RuleBackend {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        request.validate()?;
        let tag = request.oracle.ok_or(BackendError::UnknownOracle {
            key: request.cache_key(),
        })?;
        let (text, notes) = match self.run(tag, request) {
            Ok(ok) => ok,
            Err(e) => (format!("ERROR: {e}"), Vec::new()),
        };
        Ok(BackendResponse {
            text,
            notes,
            ..BackendResponse::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(tag: OracleTag, inputs: &[(&str, &str)], params: &[(&str, &str)]) -> BackendRequest {
        let mut r = BackendRequest::new("rule", "prompt");
        r.oracle = Some(tag);
        r.structured_inputs = inputs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        r.params = params.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        r
    }

    fn answer(r: &BackendRequest) -> String {
        RuleBackend::new().complete(r).unwrap().text
    }

    #[test]
    fn oracle_answers() {
        assert_eq!(
            answer(&request(OracleTag::NormalizeRating, &[("user_rating", "3")], &[("lo", "1"), ("hi", "5")])),
            "0.5"
        );
        assert_eq!(answer(&request(OracleTag::DateNormalize, &[("date", "1999-03-05")], &[])), "19990305");
        assert_eq!(answer(&request(OracleTag::ToUnixEpoch, &[("d", "19700101")], &[])), "0");
        assert_eq!(
            answer(&request(OracleTag::EmbedText, &[("item_name", "")], &[("dim", "8")])),
            "ERROR: empty text"
        );
    }

    #[test]
    fn errors_are_in_band() {
        let r = request(OracleTag::DateNormalize, &[("date", "Feb 30, 2020")], &[]);
        assert!(answer(&r).starts_with("ERROR: invalid calendar date"));
        let r = request(OracleTag::NormalizeRating, &[("r", "3")], &[("lo", "x"), ("hi", "5")]);
        assert!(answer(&r).starts_with("ERROR: parameter \"lo\""));
        let r = request(OracleTag::ClassifyItemType, &[("n", "kite"), ("t", "Toys")], &[("taxonomy", "nope")]);
        assert!(answer(&r).starts_with("ERROR:"));
    }

    #[test]
    fn unverified_note() {
        let r = request(
            OracleTag::ClassifyItemType,
            &[("n", "mystery item"), ("t", "Home")],
            &[("taxonomy", BUILTIN_TAXONOMY_ID)],
        );
        let resp = RuleBackend::new().complete(&r).unwrap();
        assert_eq!(resp.text, "Home");
        assert_eq!(resp.notes, vec![UNVERIFIED_NOTE.to_string()]);
    }

    #[test]
    fn missing_oracle_is_an_error() {
        let r = BackendRequest::new("rule", "p");
        assert!(matches!(RuleBackend::new().complete(&r), Err(BackendError::UnknownOracle { .. })));
    }
}
