//! Static bearer tokens mapped to annotator ids.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use axum::extract::FromRequestParts;
use axum::http::header::AUTHORIZATION;
use axum::http::request::Parts;

use crate::error::ApiError;
use crate::AppState;

/// `{"<token>": "<annotator_id>", ...}`
#[derive(Debug, Clone, Default)]
pub struct Tokens(HashMap<String, String>);

impl Tokens {
    pub fn new(map: HashMap<String, String>) -> Self {
        Self(map)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let map: HashMap<String, String> =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if let Some((_, who)) = map.iter().find(|(t, a)| t.is_empty() || a.is_empty()) {
            return Err(format!("{}: empty token or annotator id ({who:?})", path.display()));
        }
        Ok(Self(map))
    }

    pub fn annotator(&self, token: &str) -> Option<&str> {
        self.0.get(token).map(String::as_str)
    }
}

/// The authenticated annotator. Taken from `Authorization: Bearer <token>`,
/// or from an `access_token` query parameter for plain image links.
#[derive(Debug, Clone)]
pub struct Annotator(pub String);

fn query_token(query: &str) -> Option<&str> {
    query.split('&').find_map(|pair| pair.strip_prefix("access_token="))
}

impl FromRequestParts<Arc<AppState>> for Annotator {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> Result<Self, Self::Rejection> {
        let header = parts
            .headers
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim);
        let token = header.or_else(|| parts.uri.query().and_then(query_token)).ok_or_else(ApiError::unauthorized)?;
        state.tokens.annotator(token).map(|a| Annotator(a.to_string())).ok_or_else(ApiError::unauthorized)
    }
}
