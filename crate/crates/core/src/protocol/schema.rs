//! Compiled-in schema table and the actor classes built on it.

use std::f64::consts::PI;

use serde_json::{json, Map, Value};
use thiserror::Error;

use super::{ActorClass, SchemaRef};

pub const ARENA_OBS_V1: (&str, u32) = ("arena_obs", 1);
pub const ARENA_ACTION_V1: (&str, u32) = ("arena_action", 1);
pub const ARENA_WORLD_V1: (&str, u32) = ("arena_world", 1);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaViolation {
    /// First offending path, e.g. `forward` or `visible_players[0].x`.
    #[error("schema violation at `{0}`")]
    Field(String),
    #[error("unknown schema {0}")]
    UnknownSchema(String),
}

#[derive(Debug)]
enum Kind {
    Bool,
    Str,
    Number { min: f64, max: f64 },
    Integer { min: i64 },
    Object(&'static [Field]),
    List(&'static Kind),
}

#[derive(Debug)]
struct Field {
    name: &'static str,
    kind: Kind,
}

const fn f(name: &'static str, kind: Kind) -> Field {
    Field { name, kind }
}

const UNIT: Kind = Kind::Number { min: -1.0, max: 1.0 };
const REAL: Kind = Kind::Number { min: f64::MIN, max: f64::MAX };
const ANGLE: Kind = Kind::Number { min: -PI, max: PI };
const TICK: Kind = Kind::Integer { min: 0 };

const ACTION_FIELDS: &[Field] = &[
    f("fire", Kind::Bool),
    f("strafe", UNIT),
    f("forward", UNIT),
    f("rotate", UNIT),
];

const SELF_FIELDS: &[Field] = &[
    f("x", REAL),
    f("y", REAL),
    f("theta", ANGLE),
    f("alive", Kind::Bool),
];

const SEEN_PLAYER_FIELDS: &[Field] = &[
    f("x", REAL),
    f("y", REAL),
    f("theta", ANGLE),
    f("opponent", Kind::Bool),
    f("alive", Kind::Bool),
];

const SEEN_PROJECTILE_FIELDS: &[Field] = &[f("x", REAL), f("y", REAL), f("vx", REAL), f("vy", REAL)];

const OBS_FIELDS: &[Field] = &[
    f("self", Kind::Object(SELF_FIELDS)),
    f("visible_players", Kind::List(&Kind::Object(SEEN_PLAYER_FIELDS))),
    f("visible_projectiles", Kind::List(&Kind::Object(SEEN_PROJECTILE_FIELDS))),
    f("tick_id", TICK),
];

const WORLD_PLAYER_FIELDS: &[Field] = &[
    f("name", Kind::Str),
    f("team", Kind::Integer { min: 0 }),
    f("x", REAL),
    f("y", REAL),
    f("theta", ANGLE),
    f("alive", Kind::Bool),
];

const WORLD_PROJECTILE_FIELDS: &[Field] = &[
    f("owner", Kind::Str),
    f("team", Kind::Integer { min: 0 }),
    f("x", REAL),
    f("y", REAL),
    f("vx", REAL),
    f("vy", REAL),
];

const WORLD_FIELDS: &[Field] = &[
    f("arena_size", Kind::Number { min: 0.0, max: f64::MAX }),
    f("players", Kind::List(&Kind::Object(WORLD_PLAYER_FIELDS))),
    f("projectiles", Kind::List(&Kind::Object(WORLD_PROJECTILE_FIELDS))),
    f("tick_id", TICK),
];

fn layout(schema: &SchemaRef) -> Option<&'static [Field]> {
    match (schema.schema_name.as_str(), schema.version) {
        ARENA_OBS_V1 => Some(OBS_FIELDS),
        ARENA_ACTION_V1 => Some(ACTION_FIELDS),
        ARENA_WORLD_V1 => Some(WORLD_FIELDS),
        _ => None,
    }
}

/// Looks up a schema by reference, for callers that only need existence.
pub fn schema_for(name: &str, version: u32) -> Option<SchemaRef> {
    let r = SchemaRef::new(name, version);
    layout(&r).map(|_| r)
}

/// Succeeds iff `value` has exactly the fields, types and ranges of `schema`.
pub fn validate_against_schema(value: &Value, schema: &SchemaRef) -> Result<(), SchemaViolation> {
    let fields = layout(schema).ok_or_else(|| SchemaViolation::UnknownSchema(schema.to_string()))?;
    check_object(value, fields, "")
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn check_object(value: &Value, fields: &[Field], path: &str) -> Result<(), SchemaViolation> {
    let obj: &Map<String, Value> = value.as_object().ok_or_else(|| {
        // A non-object at the root is reported at its first expected field.
        let at = if path.is_empty() { fields.first().map_or("$", |f| f.name).to_string() } else { path.to_string() };
        SchemaViolation::Field(at)
    })?;
    for field in fields {
        let at = join(path, field.name);
        let v = obj.get(field.name).ok_or_else(|| SchemaViolation::Field(at.clone()))?;
        check_kind(v, &field.kind, &at)?;
    }
    if let Some(extra) = obj.keys().find(|k| !fields.iter().any(|f| f.name == k.as_str())) {
        return Err(SchemaViolation::Field(join(path, extra)));
    }
    Ok(())
}

fn check_kind(v: &Value, kind: &Kind, at: &str) -> Result<(), SchemaViolation> {
    let bad = || SchemaViolation::Field(at.to_string());
    match kind {
        Kind::Bool => v.as_bool().map(|_| ()).ok_or_else(bad),
        Kind::Str => v.as_str().map(|_| ()).ok_or_else(bad),
        Kind::Number { min, max } => {
            let x = v.as_f64().ok_or_else(bad)?;
            if x.is_finite() && x >= *min && x <= *max {
                Ok(())
            } else {
                Err(bad())
            }
        }
        Kind::Integer { min } => {
            let ok = v.as_u64().is_some() || v.as_i64().is_some_and(|i| i >= *min);
            if ok && (v.is_u64() || v.is_i64()) {
                Ok(())
            } else {
                Err(bad())
            }
        }
        Kind::Object(fields) => check_object(v, fields, at),
        Kind::List(inner) => {
            let items = v.as_array().ok_or_else(bad)?;
            for (i, item) in items.iter().enumerate() {
                check_kind(item, inner, &format!("{at}[{i}]"))?;
            }
            Ok(())
        }
    }
}

/// The compiled-in actor classes.
pub fn actor_classes() -> Vec<ActorClass> {
    let zero_action = json!({"fire": false, "strafe": 0.0, "forward": 0.0, "rotate": 0.0});
    vec![
        ActorClass {
            class_name: "player".into(),
            observation_schema: SchemaRef::new(ARENA_OBS_V1.0, ARENA_OBS_V1.1),
            action_schema: SchemaRef::new(ARENA_ACTION_V1.0, ARENA_ACTION_V1.1),
            default_action: zero_action.clone(),
            acts: true,
        },
        ActorClass {
            class_name: "observer".into(),
            observation_schema: SchemaRef::new(ARENA_WORLD_V1.0, ARENA_WORLD_V1.1),
            action_schema: SchemaRef::new(ARENA_ACTION_V1.0, ARENA_ACTION_V1.1),
            default_action: zero_action,
            acts: false,
        },
    ]
}

pub fn actor_class(name: &str) -> Option<ActorClass> {
    actor_classes().into_iter().find(|c| c.class_name == name)
}
