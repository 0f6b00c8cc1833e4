//! Canonical fully-qualified method signatures.
//!
//! Grammar: `<namespace>.<Type>.<method>(<param-type>,...)` with no spaces.
//! The namespace is one or more dotted identifiers, parameter types are
//! simple identifiers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Signature {
    pub namespace: String,
    pub type_name: String,
    pub method: String,
    pub params: Vec<String>,
}

impl Signature {
    pub fn new(
        namespace: impl Into<String>,
        type_name: impl Into<String>,
        method: impl Into<String>,
        params: Vec<String>,
    ) -> Self {
        Signature {
            namespace: namespace.into(),
            type_name: type_name.into(),
            method: method.into(),
            params,
        }
    }

    /// `<namespace>.<Type>`
    pub fn declaring_type(&self) -> String {
        format!("{}.{}", self.namespace, self.type_name)
    }

    pub fn arity(&self) -> usize {
        self.params.len()
    }

    pub fn is_constructor(&self) -> bool {
        self.method == "__init__"
    }
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c == '_' || c.is_alphabetic() => {}
        _ => return false,
    }
    chars.all(|c| c == '_' || c.is_alphanumeric())
}

impl FromStr for Signature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |why: &str| Error::Signature(s.to_string(), why.to_string());
        if s.chars().any(char::is_whitespace) {
            return Err(bad("contains whitespace"));
        }
        let open = s.find('(').ok_or_else(|| bad("missing parameter list"))?;
        let params_text = s[open + 1..]
            .strip_suffix(')')
            .ok_or_else(|| bad("parameter list not closed"))?;
        let qualified = &s[..open];
        let parts: Vec<&str> = qualified.split('.').collect();
        if parts.len() < 3 {
            return Err(bad("not fully qualified"));
        }
        if let Some(p) = parts.iter().find(|p| !is_identifier(p)) {
            return Err(bad(&format!("`{p}` is not an identifier")));
        }
        let params: Vec<String> = if params_text.is_empty() {
            Vec::new()
        } else {
            params_text.split(',').map(str::to_string).collect()
        };
        if let Some(p) = params.iter().find(|p| !is_identifier(p)) {
            return Err(bad(&format!("parameter type `{p}` is not a simple name")));
        }
        let n = parts.len();
        Ok(Signature {
            namespace: parts[..n - 2].join("."),
            type_name: parts[n - 2].to_string(),
            method: parts[n - 1].to_string(),
            params,
        })
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{}.{}({})",
            self.namespace,
            self.type_name,
            self.method,
            self.params.join(",")
        )
    }
}

impl TryFrom<String> for Signature {
    type Error = Error;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<Signature> for String {
    fn from(sig: Signature) -> String {
        sig.to_string()
    }
}
