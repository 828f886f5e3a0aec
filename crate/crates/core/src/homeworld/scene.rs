use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::catalog::{self, Archetype, RoomKind};
use super::{Capability, ObjectId, Relation, State, MAX_IDS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Room {
    pub id: ObjectId,
    pub kind: RoomKind,
}

/// Where an object rests. Furniture sits in a room; items rest inside or on
/// top of furniture, or in the character's hands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Room(ObjectId),
    Inside(ObjectId),
    OnTop(ObjectId),
    Held,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub id: ObjectId,
    pub archetype: Archetype,
    pub states: BTreeSet<State>,
    pub location: Location,
    /// Receptacle an item returns to under PUTOBJBACK.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub home: Option<ObjectId>,
}

impl Object {
    pub fn has(&self, cap: Capability) -> bool {
        self.archetype.has(cap)
    }

    pub fn pluggable(&self) -> bool {
        self.archetype.spec().pluggable
    }

    pub fn is(&self, state: State) -> bool {
        self.states.contains(&state)
    }

    pub fn name(&self) -> &'static str {
        self.archetype.name()
    }

    pub fn capabilities(&self) -> &'static [Capability] {
        self.archetype.spec().capabilities
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Character {
    pub id: ObjectId,
    pub room: ObjectId,
    pub holding: Vec<ObjectId>,
    pub close: BTreeSet<ObjectId>,
    pub sitting_on: Option<ObjectId>,
}

/// Size classes bound the number of rooms and objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    #[default]
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub fn rooms(self) -> (usize, usize) {
        match self {
            SizeClass::Small => (3, 4),
            SizeClass::Medium => (4, 5),
            SizeClass::Large => (5, 6),
        }
    }

    pub fn objects(self) -> (usize, usize) {
        match self {
            SizeClass::Small => (15, 24),
            SizeClass::Medium => (25, 40),
            SizeClass::Large => (41, 60),
        }
    }
}

impl std::str::FromStr for SizeClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small" => Ok(SizeClass::Small),
            "medium" => Ok(SizeClass::Medium),
            "large" => Ok(SizeClass::Large),
            other => Err(format!("unknown size class `{other}`")),
        }
    }
}

/// Fully observed household state. Relations are derived from object
/// locations and the character record, so they cannot drift out of sync.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "SceneRecord", try_from = "SceneRecord")]
pub struct SceneGraph {
    rooms: Vec<Room>,
    objects: BTreeMap<ObjectId, Object>,
    character: Character,
}

pub type Edge = (ObjectId, Relation, ObjectId);

impl SceneGraph {
    pub fn new(rooms: Vec<Room>, objects: Vec<Object>, character: Character) -> Result<Self, String> {
        let scene = SceneGraph {
            rooms,
            objects: objects.into_iter().map(|o| (o.id, o)).collect(),
            character,
        };
        scene.check_invariants()?;
        Ok(scene)
    }

    pub fn rooms(&self) -> &[Room] {
        &self.rooms
    }

    pub fn objects(&self) -> impl Iterator<Item = &Object> {
        self.objects.values()
    }

    pub fn object(&self, id: ObjectId) -> Option<&Object> {
        self.objects.get(&id)
    }

    pub(crate) fn object_mut(&mut self, id: ObjectId) -> Option<&mut Object> {
        self.objects.get_mut(&id)
    }

    pub fn character(&self) -> &Character {
        &self.character
    }

    pub(crate) fn character_mut(&mut self) -> &mut Character {
        &mut self.character
    }

    pub fn room(&self, id: ObjectId) -> Option<&Room> {
        self.rooms.iter().find(|r| r.id == id)
    }

    /// True for rooms, objects and the character.
    pub fn contains(&self, id: ObjectId) -> bool {
        id == self.character.id || self.objects.contains_key(&id) || self.room(id).is_some()
    }

    pub fn name_of(&self, id: ObjectId) -> Option<&'static str> {
        if id == self.character.id {
            return Some("character");
        }
        if let Some(o) = self.objects.get(&id) {
            return Some(o.name());
        }
        self.room(id).map(|r| r.kind.name())
    }

    pub fn has_state(&self, id: ObjectId, state: State) -> bool {
        if id == self.character.id {
            return state == State::Sitting && self.character.sitting_on.is_some();
        }
        self.objects.get(&id).is_some_and(|o| o.is(state))
    }

    /// The furniture an item rests in or on.
    pub fn receptacle(&self, id: ObjectId) -> Option<ObjectId> {
        match self.objects.get(&id)?.location {
            Location::Inside(r) | Location::OnTop(r) => Some(r),
            _ => None,
        }
    }

    /// Objects resting in or on `id`.
    pub fn contents(&self, id: ObjectId) -> Vec<ObjectId> {
        self.objects
            .values()
            .filter(|o| matches!(o.location, Location::Inside(r) | Location::OnTop(r) if r == id))
            .map(|o| o.id)
            .collect()
    }

    /// The room an object belongs to, following receptacles and hands.
    pub fn room_of(&self, id: ObjectId) -> Option<ObjectId> {
        if id == self.character.id {
            return Some(self.character.room);
        }
        if self.room(id).is_some() {
            return Some(id);
        }
        let mut current = id;
        for _ in 0..4 {
            match self.objects.get(&current)?.location {
                Location::Room(r) => return Some(r),
                Location::Inside(r) | Location::OnTop(r) => current = r,
                Location::Held => return Some(self.character.room),
            }
        }
        None
    }

    /// The closed container that blocks access to an item, if any.
    pub fn blocking_container(&self, id: ObjectId) -> Option<ObjectId> {
        match self.objects.get(&id)?.location {
            Location::Inside(c) if self.has_state(c, State::Closed) => Some(c),
            _ => None,
        }
    }

    pub fn edges(&self) -> BTreeSet<Edge> {
        let mut edges = BTreeSet::new();
        let ch = &self.character;
        edges.insert((ch.id, Relation::Inside, ch.room));
        for o in self.objects.values() {
            match o.location {
                Location::Room(r) | Location::Inside(r) => {
                    edges.insert((o.id, Relation::Inside, r));
                }
                Location::OnTop(r) => {
                    edges.insert((o.id, Relation::OnTop, r));
                }
                Location::Held => {
                    edges.insert((ch.id, Relation::Holds, o.id));
                }
            }
        }
        if let Some(seat) = ch.sitting_on {
            edges.insert((ch.id, Relation::OnTop, seat));
        }
        for &c in &ch.close {
            edges.insert((ch.id, Relation::Close, c));
        }
        edges
    }

    pub fn has_edge(&self, edge: Edge) -> bool {
        let (a, rel, b) = edge;
        let ch = &self.character;
        if a == ch.id {
            return match rel {
                Relation::Inside => ch.room == b,
                Relation::OnTop => ch.sitting_on == Some(b),
                Relation::Close => ch.close.contains(&b),
                Relation::Holds => ch.holding.contains(&b),
            };
        }
        match (self.objects.get(&a).map(|o| o.location), rel) {
            (Some(Location::Room(r) | Location::Inside(r)), Relation::Inside) => r == b,
            (Some(Location::OnTop(r)), Relation::OnTop) => r == b,
            _ => false,
        }
    }

    /// Objects grouped by the room they belong to, rooms in id order and
    /// objects in id order within each room.
    pub fn by_room(&self) -> Vec<(&Room, Vec<&Object>)> {
        let mut rooms: Vec<&Room> = self.rooms.iter().collect();
        rooms.sort_by_key(|r| r.id);
        rooms
            .into_iter()
            .map(|r| {
                let members = self
                    .objects
                    .values()
                    .filter(|o| self.room_of(o.id) == Some(r.id))
                    .collect();
                (r, members)
            })
            .collect()
    }

    pub fn ids(&self) -> BTreeSet<ObjectId> {
        let mut ids: BTreeSet<ObjectId> = self.objects.keys().copied().collect();
        ids.extend(self.rooms.iter().map(|r| r.id));
        ids.insert(self.character.id);
        ids
    }

    /// Checks every structural invariant, naming the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for id in std::iter::once(self.character.id)
            .chain(self.rooms.iter().map(|r| r.id))
            .chain(self.objects.keys().copied())
        {
            if id >= MAX_IDS {
                return Err(format!("id {id} outside 0..{MAX_IDS}"));
            }
            if !seen.insert(id) {
                return Err(format!("duplicate id {id}"));
            }
        }
        let ch = &self.character;
        if self.room(ch.room).is_none() {
            return Err(format!("character room {} is not a room", ch.room));
        }
        if ch.holding.len() > 2 {
            return Err(format!("character holds {} objects", ch.holding.len()));
        }
        for &c in &ch.close {
            if !self.objects.contains_key(&c) {
                return Err(format!("CLOSE edge to unknown object {c}"));
            }
        }
        if let Some(seat) = ch.sitting_on {
            match self.objects.get(&seat) {
                Some(o) if o.has(Capability::Sittable) => {}
                _ => return Err(format!("sitting on non-sittable {seat}")),
            }
        }
        for o in self.objects.values() {
            match o.location {
                Location::Room(r) => {
                    if self.room(r).is_none() {
                        return Err(format!("object {} in unknown room {r}", o.id));
                    }
                    if o.archetype.is_item() {
                        return Err(format!("item {} rests directly in a room", o.id));
                    }
                }
                Location::Inside(r) | Location::OnTop(r) => {
                    let cap = if matches!(o.location, Location::Inside(_)) {
                        Capability::Container
                    } else {
                        Capability::Surface
                    };
                    match self.objects.get(&r) {
                        Some(host) if host.has(cap) && !host.archetype.is_item() => {}
                        _ => return Err(format!("object {} rests on invalid receptacle {r}", o.id)),
                    }
                    if !o.archetype.is_item() {
                        return Err(format!("furniture {} rests on another object", o.id));
                    }
                }
                Location::Held => {
                    if !ch.holding.contains(&o.id) {
                        return Err(format!("object {} held but not in hands", o.id));
                    }
                }
            }
            if self.room_of(o.id).is_none() {
                return Err(format!("object {} is in no room", o.id));
            }
            let slots = o.archetype.state_slots();
            for [a, b] in &slots {
                if o.is(*a) == o.is(*b) {
                    return Err(format!(
                        "object {} must have exactly one of {a:?}/{b:?}",
                        o.id
                    ));
                }
            }
            let allowed: BTreeSet<State> = slots.iter().flatten().copied().collect();
            if let Some(extra) = o.states.iter().find(|s| !allowed.contains(s)) {
                return Err(format!("object {} has unsupported state {extra:?}", o.id));
            }
        }
        for &h in &ch.holding {
            match self.objects.get(&h) {
                Some(o) if o.location == Location::Held && o.has(Capability::Grabbable) => {}
                _ => return Err(format!("hands hold invalid object {h}")),
            }
        }
        Ok(())
    }
}

/// Serialized form with an explicit relation list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    rooms: Vec<Room>,
    objects: Vec<Object>,
    character: Character,
    relations: Vec<Edge>,
}

impl From<SceneGraph> for SceneRecord {
    fn from(scene: SceneGraph) -> Self {
        let relations = scene.edges().into_iter().collect();
        SceneRecord {
            rooms: scene.rooms,
            objects: scene.objects.into_values().collect(),
            character: scene.character,
            relations,
        }
    }
}

impl TryFrom<SceneRecord> for SceneGraph {
    type Error = String;

    fn try_from(record: SceneRecord) -> Result<Self, Self::Error> {
        let scene = SceneGraph::new(record.rooms, record.objects, record.character)?;
        let stored: BTreeSet<Edge> = record.relations.into_iter().collect();
        if stored != scene.edges() {
            return Err("relation list does not match object locations".into());
        }
        Ok(scene)
    }
}

/// Furniture every room of a kind receives before random additions.
fn core_furniture(kind: RoomKind) -> &'static [Archetype] {
    use Archetype as A;
    match kind {
        RoomKind::Kitchen => &[A::Fridge, A::Cupboard, A::Sink, A::KitchenCounter, A::Microwave],
        RoomKind::LivingRoom => &[A::Sofa, A::Tv, A::CoffeeTable],
        RoomKind::Bedroom => &[A::Bed, A::Lamp],
        RoomKind::Bathroom => &[A::Sink, A::Cabinet],
        RoomKind::DiningRoom => &[A::Table, A::Chair],
        RoomKind::Office => &[A::Desk, A::Computer],
    }
}

/// Generates a scene deterministically from `seed`.
pub fn generate_scene(seed: u64, size: SizeClass) -> SceneGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE9E);
    let (rmin, rmax) = size.rooms();
    let n_rooms = rng.gen_range(rmin..=rmax);
    let mut kinds = vec![RoomKind::Kitchen, RoomKind::LivingRoom, RoomKind::Bedroom];
    let mut rest: Vec<RoomKind> = RoomKind::ALL
        .into_iter()
        .filter(|k| !kinds.contains(k))
        .collect();
    rest.shuffle(&mut rng);
    kinds.extend(rest.into_iter().take(n_rooms - kinds.len()));

    let mut ids: Vec<ObjectId> = (0..MAX_IDS).collect();
    ids.shuffle(&mut rng);
    let mut ids = ids.into_iter();
    let character_id = ids.next().expect("id pool");
    let rooms: Vec<Room> = kinds
        .iter()
        .map(|&kind| Room {
            id: ids.next().expect("id pool"),
            kind,
        })
        .collect();

    let (omin, omax) = size.objects();
    let omax = omax.min(MAX_IDS as usize - 1 - rooms.len());
    let target = rng.gen_range(omin..=omax);

    let mut objects: Vec<Object> = Vec::new();
    let add_furniture = |arch: Archetype, room: ObjectId, rng: &mut ChaCha8Rng, id: ObjectId| {
        Object {
            id,
            archetype: arch,
            states: initial_states(arch, rng),
            location: Location::Room(room),
            home: None,
        }
    };
    for room in &rooms {
        for &arch in core_furniture(room.kind) {
            let id = ids.next().expect("id pool");
            objects.push(add_furniture(arch, room.id, &mut rng, id));
        }
    }
    // Extra furniture: roughly 40% of the budget overall.
    let furniture_target = (target * 2 / 5).max(objects.len());
    while objects.len() < furniture_target {
        let room = rooms.choose(&mut rng).expect("rooms");
        let options: Vec<Archetype> = catalog::furniture()
            .filter(|a| a.spec().rooms.contains(&room.kind))
            .collect();
        let arch = *options.choose(&mut rng).expect("every room kind has furniture");
        let id = ids.next().expect("id pool");
        objects.push(add_furniture(arch, room.id, &mut rng, id));
    }

    let item_kinds: Vec<Archetype> = catalog::items().collect();
    let mut attempts = 0;
    while objects.len() < target && attempts < 1000 {
        attempts += 1;
        let arch = *item_kinds.choose(&mut rng).expect("items");
        let homes: Vec<ObjectId> = objects
            .iter()
            .filter(|o| arch.spec().homes.contains(&o.archetype))
            .map(|o| o.id)
            .collect();
        let Some(&home) = homes.choose(&mut rng) else {
            continue;
        };
        // A quarter of the items start away from home.
        let resting = if rng.gen_bool(0.25) {
            let others: Vec<ObjectId> = objects
                .iter()
                .filter(|o| {
                    !o.archetype.is_item()
                        && o.id != home
                        && (o.has(Capability::Surface) || o.has(Capability::Container))
                })
                .map(|o| o.id)
                .collect();
            *others.choose(&mut rng).unwrap_or(&home)
        } else {
            home
        };
        let host = objects.iter().find(|o| o.id == resting).expect("receptacle");
        let location = if host.has(Capability::Container) {
            Location::Inside(resting)
        } else {
            Location::OnTop(resting)
        };
        let id = ids.next().expect("id pool");
        objects.push(Object {
            id,
            archetype: arch,
            states: initial_states(arch, &mut rng),
            location,
            home: Some(home),
        });
    }

    let start = rooms.choose(&mut rng).expect("rooms").id;
    let character = Character {
        id: character_id,
        room: start,
        holding: Vec::new(),
        close: BTreeSet::new(),
        sitting_on: None,
    };
    SceneGraph::new(rooms, objects, character).expect("generated scenes satisfy invariants")
}

/// Hidden initial states: doors open or closed at random, devices off,
/// plugs and dirt at random. Sinks always start off.
fn initial_states(arch: Archetype, rng: &mut impl Rng) -> BTreeSet<State> {
    let mut states = BTreeSet::new();
    for [a, b] in arch.state_slots() {
        let pick = match a {
            State::On => b,
            _ => {
                if rng.gen_bool(0.5) {
                    a
                } else {
                    b
                }
            }
        };
        states.insert(pick);
    }
    states
}

impl SceneGraph {
    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("scenes serialize");
        hex::encode(Sha256::digest(json))
    }
}
