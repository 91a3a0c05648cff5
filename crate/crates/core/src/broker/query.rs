//! Entity query filters: type, attribute predicates, and `near` geo filtering.
//!
//! The `q` syntax is a `;`-separated conjunction of `attr<op>literal` terms,
//! with `op` one of `==` (or `=`), `<`, `>`, `>=`, `<=`. String literals are
//! double-quoted; bare words are accepted as strings.

use std::cmp::Ordering;
use std::fmt;

use serde_json::Value;

use crate::entity::{validate_attribute_name, Entity};
use crate::geo::GeoPoint;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid query: {0}")]
pub struct QueryError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareOp {
    Eq,
    Lt,
    Gt,
    Ge,
    Le,
}

impl CompareOp {
    fn symbol(self) -> &'static str {
        match self {
            CompareOp::Eq => "==",
            CompareOp::Lt => "<",
            CompareOp::Gt => ">",
            CompareOp::Ge => ">=",
            CompareOp::Le => "<=",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub attribute: String,
    pub op: CompareOp,
    pub literal: Value,
}

impl Predicate {
    pub fn new(attribute: impl Into<String>, op: CompareOp, literal: impl Into<Value>) -> Self {
        Predicate {
            attribute: attribute.into(),
            op,
            literal: literal.into(),
        }
    }

    pub fn matches(&self, e: &Entity) -> bool {
        let Some(attr) = e.attribute(&self.attribute) else {
            return false;
        };
        let value = attr.simple_value();
        match self.op {
            CompareOp::Eq => json_eq(&value, &self.literal),
            op => match json_cmp(&value, &self.literal) {
                Some(ord) => match op {
                    CompareOp::Lt => ord == Ordering::Less,
                    CompareOp::Gt => ord == Ordering::Greater,
                    CompareOp::Ge => ord != Ordering::Less,
                    CompareOp::Le => ord != Ordering::Greater,
                    CompareOp::Eq => unreachable!(),
                },
                None => false,
            },
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.attribute, self.op.symbol(), self.literal)
    }
}

fn json_eq(a: &Value, b: &Value) -> bool {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => x == y,
        _ => a == b,
    }
}

fn json_cmp(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Number(_), Value::Number(_)) => a.as_f64()?.partial_cmp(&b.as_f64()?),
        (Value::String(x), Value::String(y)) => Some(x.cmp(y)),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NearFilter {
    pub point: GeoPoint,
    pub max_distance_m: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Query {
    pub entity_type: Option<String>,
    pub predicates: Vec<Predicate>,
    pub near: Option<NearFilter>,
}

impl Query {
    pub fn by_type(t: impl Into<String>) -> Self {
        Query {
            entity_type: Some(t.into()),
            ..Default::default()
        }
    }

    pub fn with_predicate(mut self, p: Predicate) -> Self {
        self.predicates.push(p);
        self
    }

    pub fn near(mut self, point: GeoPoint, max_distance_m: f64) -> Self {
        self.near = Some(NearFilter { point, max_distance_m });
        self
    }

    /// Returns the distance to the `near` point (0 when no geo filter) if
    /// the entity satisfies every filter.
    pub fn evaluate(&self, e: &Entity) -> Option<f64> {
        if let Some(t) = &self.entity_type {
            if e.entity_type() != t {
                return None;
            }
        }
        if !self.predicates.iter().all(|p| p.matches(e)) {
            return None;
        }
        match &self.near {
            None => Some(0.0),
            Some(near) => {
                let d = near.point.distance_m(&e.location()?);
                (d <= near.max_distance_m).then_some(d)
            }
        }
    }

    /// Applies the query to a full scan, producing the documented order.
    pub fn apply<'a>(&self, entities: impl IntoIterator<Item = &'a Entity>) -> Vec<Entity> {
        let mut hits: Vec<(f64, &Entity)> = entities
            .into_iter()
            .filter_map(|e| self.evaluate(e).map(|d| (d, e)))
            .collect();
        if self.near.is_some() {
            hits.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id().cmp(b.1.id())));
        } else {
            hits.sort_by(|a, b| a.1.id().cmp(b.1.id()));
        }
        hits.into_iter().map(|(_, e)| e.clone()).collect()
    }

    pub fn parse_q(q: &str) -> Result<Vec<Predicate>, QueryError> {
        q.split(';')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(parse_term)
            .collect()
    }

    /// Parses the `georel` / `geometry` / `coordinates` parameter triple.
    /// Only `near;maxDistance==<m>` around a `Point` is supported.
    pub fn parse_geo(
        georel: &str,
        geometry: Option<&str>,
        coordinates: Option<&str>,
    ) -> Result<NearFilter, QueryError> {
        let err = |m: &str| QueryError(m.to_string());
        let mut parts = georel.split(';');
        if parts.next() != Some("near") {
            return Err(err("only georel=near is supported"));
        }
        let mut max = None;
        for p in parts {
            let (k, v) = p.split_once("==").ok_or_else(|| err("malformed georel modifier"))?;
            if k != "maxDistance" {
                return Err(err("only the maxDistance modifier is supported"));
            }
            let d: f64 = v.parse().map_err(|_| err("maxDistance must be a number"))?;
            if !(d.is_finite() && d >= 0.0) {
                return Err(err("maxDistance must be non-negative"));
            }
            max = Some(d);
        }
        let max_distance_m = max.ok_or_else(|| err("near requires maxDistance"))?;
        if geometry != Some("Point") {
            return Err(err("geometry must be Point"));
        }
        let coords: Vec<f64> = serde_json::from_str(coordinates.ok_or_else(|| err("missing coordinates"))?)
            .map_err(|_| err("coordinates must be [lat, lon]"))?;
        let [lat, lon] = coords[..] else {
            return Err(err("coordinates must be [lat, lon]"));
        };
        let point = GeoPoint::new(lat, lon).map_err(|e| QueryError(e.to_string()))?;
        Ok(NearFilter { point, max_distance_m })
    }

    /// Query-string parameters that reproduce this query over HTTP.
    pub fn to_params(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if let Some(t) = &self.entity_type {
            out.push(("type".into(), t.clone()));
        }
        if !self.predicates.is_empty() {
            let q = self
                .predicates
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(";");
            out.push(("q".into(), q));
        }
        if let Some(n) = &self.near {
            out.push(("georel".into(), format!("near;maxDistance=={}", n.max_distance_m)));
            out.push(("geometry".into(), "Point".into()));
            out.push(("coordinates".into(), format!("[{},{}]", n.point.lat(), n.point.lon())));
        }
        out
    }
}

const OPERATOR_CHARS: &[char] = &['=', '<', '>', '!', '~'];

fn parse_term(term: &str) -> Result<Predicate, QueryError> {
    let op_start = term
        .find(OPERATOR_CHARS)
        .ok_or_else(|| QueryError(format!("missing operator in {term:?}")))?;
    let attribute = term[..op_start].trim();
    validate_attribute_name(attribute).map_err(|_| QueryError(format!("bad attribute name {attribute:?}")))?;
    let rest = &term[op_start..];
    let op_len = rest.find(|c| !OPERATOR_CHARS.contains(&c)).unwrap_or(rest.len());
    let op = match &rest[..op_len] {
        "==" | "=" => CompareOp::Eq,
        "<" => CompareOp::Lt,
        ">" => CompareOp::Gt,
        ">=" => CompareOp::Ge,
        "<=" => CompareOp::Le,
        other => return Err(QueryError(format!("unknown operator {other:?}"))),
    };
    let literal = parse_literal(rest[op_len..].trim())?;
    Ok(Predicate {
        attribute: attribute.to_string(),
        op,
        literal,
    })
}

fn parse_literal(raw: &str) -> Result<Value, QueryError> {
    if raw.is_empty() {
        return Err(QueryError("empty literal".into()));
    }
    if raw.starts_with('"') {
        return match serde_json::from_str::<Value>(raw) {
            Ok(v @ Value::String(_)) => Ok(v),
            _ => Err(QueryError(format!("malformed string literal {raw:?}"))),
        };
    }
    if let Ok(v @ (Value::Number(_) | Value::Bool(_))) = serde_json::from_str::<Value>(raw) {
        return Ok(v);
    }
    if raw
        .chars()
        .all(|c| c.is_alphanumeric() || matches!(c, '_' | '-' | '.' | ':'))
    {
        return Ok(Value::String(raw.to_string()));
    }
    Err(QueryError(format!("malformed literal {raw:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn parses_operators() {
        let ps = Query::parse_q("availableSpotNumber>0;status==\"free\";n<=3;m>=1.5;k<2;x=closed").unwrap();
        let ops: Vec<_> = ps.iter().map(|p| p.op).collect();
        assert_eq!(
            ops,
            [
                CompareOp::Gt,
                CompareOp::Eq,
                CompareOp::Le,
                CompareOp::Ge,
                CompareOp::Lt,
                CompareOp::Eq
            ]
        );
        assert_eq!(ps[1].literal, json!("free"));
        assert_eq!(ps[5].literal, json!("closed"));
    }

    #[test]
    fn rejects_unknown_operator_and_bad_literal() {
        assert!(Query::parse_q("a!=3").is_err());
        assert!(Query::parse_q("a~=x").is_err());
        assert!(Query::parse_q("a>\"unterminated").is_err());
        assert!(Query::parse_q("a>").is_err());
        assert!(Query::parse_q("a>{}").is_err());
        assert!(Query::parse_q("justaname").is_err());
    }

    #[test]
    fn display_round_trips() {
        let ps = Query::parse_q("a>=1;b==\"x y\"").unwrap();
        let joined = ps.iter().map(ToString::to_string).collect::<Vec<_>>().join(";");
        assert_eq!(Query::parse_q(&joined).unwrap(), ps);
    }

    #[test]
    fn geo_params() {
        let n = Query::parse_geo("near;maxDistance==1000", Some("Point"), Some("[40.331262,-3.757495]")).unwrap();
        assert_eq!(n.max_distance_m, 1000.0);
        assert_eq!(n.point.lat(), 40.331262);
        assert!(Query::parse_geo("within", Some("Point"), Some("[0,0]")).is_err());
        assert!(Query::parse_geo("near;maxDistance==5", Some("Polygon"), Some("[0,0]")).is_err());
        assert!(Query::parse_geo("near;maxDistance==5", Some("Point"), Some("[95,0]")).is_err());
    }
}
