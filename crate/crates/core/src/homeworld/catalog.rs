//! Fixed archetype catalog: what each kind of object can do, where it may
//! appear, and where small items belong.

use serde::{Deserialize, Serialize};

use super::{Capability, State};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoomKind {
    Kitchen,
    LivingRoom,
    Bedroom,
    Bathroom,
    DiningRoom,
    Office,
}

impl RoomKind {
    pub const ALL: [RoomKind; 6] = [
        RoomKind::Kitchen,
        RoomKind::LivingRoom,
        RoomKind::Bedroom,
        RoomKind::Bathroom,
        RoomKind::DiningRoom,
        RoomKind::Office,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RoomKind::Kitchen => "kitchen",
            RoomKind::LivingRoom => "living_room",
            RoomKind::Bedroom => "bedroom",
            RoomKind::Bathroom => "bathroom",
            RoomKind::DiningRoom => "dining_room",
            RoomKind::Office => "office",
        }
    }

    pub fn from_name(name: &str) -> Option<RoomKind> {
        RoomKind::ALL.into_iter().find(|r| r.name() == name)
    }
}

macro_rules! archetypes {
    ($($variant:ident => $name:literal),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum Archetype { $($variant),* }

        impl Archetype {
            pub const ALL: &'static [Archetype] = &[$(Archetype::$variant),*];

            pub fn name(self) -> &'static str {
                match self { $(Archetype::$variant => $name),* }
            }
        }
    };
}

archetypes! {
    Fridge => "fridge",
    Cupboard => "cupboard",
    Cabinet => "cabinet",
    Microwave => "microwave",
    Dishwasher => "dishwasher",
    WashingMachine => "washing_machine",
    Table => "table",
    KitchenCounter => "kitchen_counter",
    Desk => "desk",
    CoffeeTable => "coffee_table",
    Bookshelf => "bookshelf",
    Sink => "sink",
    Tv => "tv",
    Lamp => "lamp",
    Computer => "computer",
    Radio => "radio",
    Sofa => "sofa",
    Chair => "chair",
    Bed => "bed",
    Box => "box",
    Basket => "basket",
    Cup => "cup",
    Plate => "plate",
    Bowl => "bowl",
    Mug => "mug",
    Glass => "glass",
    Book => "book",
    Laptop => "laptop",
    Rag => "rag",
    Towel => "towel",
    Toy => "toy",
    RemoteControl => "remote_control",
    Apple => "apple",
    Sandwich => "sandwich",
    Phone => "phone",
    Pillow => "pillow",
    Keys => "keys",
}

/// Static properties of one archetype.
#[derive(Debug, Clone, Copy)]
pub struct Spec {
    pub capabilities: &'static [Capability],
    pub pluggable: bool,
    pub cleanable: bool,
    /// Rooms where furniture of this kind may be placed. Empty for items.
    pub rooms: &'static [RoomKind],
    /// Receptacle kinds an item may rest in or on. Empty for furniture.
    pub homes: &'static [Archetype],
    pub heatable: bool,
}

use Archetype as A;
use Capability as C;
use RoomKind as R;

const ANY_ROOM: &[RoomKind] = &RoomKind::ALL;
const DISHES: &[Archetype] = &[A::Cupboard, A::KitchenCounter, A::Table, A::Dishwasher, A::Sink];

impl Archetype {
    pub fn spec(self) -> Spec {
        let furniture = |capabilities, rooms| Spec {
            capabilities,
            pluggable: false,
            cleanable: false,
            rooms,
            homes: &[],
            heatable: false,
        };
        let item = |homes| Spec {
            capabilities: &[C::Grabbable],
            pluggable: false,
            cleanable: false,
            rooms: &[],
            homes,
            heatable: false,
        };
        match self {
            A::Fridge => furniture(&[C::Container, C::CanOpen], &[R::Kitchen]),
            A::Cupboard => furniture(&[C::Container, C::CanOpen], &[R::Kitchen, R::DiningRoom]),
            A::Cabinet => furniture(
                &[C::Container, C::CanOpen],
                &[R::LivingRoom, R::Bedroom, R::Bathroom, R::Office],
            ),
            A::Microwave => Spec {
                pluggable: true,
                ..furniture(&[C::Container, C::CanOpen, C::HasSwitch], &[R::Kitchen])
            },
            A::Dishwasher => furniture(&[C::Container, C::CanOpen, C::HasSwitch], &[R::Kitchen]),
            A::WashingMachine => Spec {
                pluggable: true,
                ..furniture(&[C::Container, C::CanOpen, C::HasSwitch], &[R::Bathroom])
            },
            A::Table => furniture(&[C::Surface], &[R::Kitchen, R::DiningRoom]),
            A::KitchenCounter => furniture(&[C::Surface], &[R::Kitchen]),
            A::Desk => furniture(&[C::Surface], &[R::Office, R::Bedroom]),
            A::CoffeeTable => furniture(&[C::Surface], &[R::LivingRoom]),
            A::Bookshelf => furniture(&[C::Surface], &[R::LivingRoom, R::Office, R::Bedroom]),
            A::Sink => furniture(&[C::Container, C::HasSwitch], &[R::Kitchen, R::Bathroom]),
            A::Tv => Spec {
                pluggable: true,
                ..furniture(&[C::HasSwitch], &[R::LivingRoom, R::Bedroom])
            },
            A::Lamp => Spec {
                pluggable: true,
                ..furniture(&[C::HasSwitch], &[R::LivingRoom, R::Bedroom, R::Office])
            },
            A::Computer => Spec {
                pluggable: true,
                ..furniture(&[C::HasSwitch], &[R::Office, R::Bedroom])
            },
            A::Radio => Spec {
                pluggable: true,
                ..furniture(&[C::HasSwitch], &[R::LivingRoom, R::Kitchen])
            },
            A::Sofa => furniture(&[C::Sittable, C::Surface], &[R::LivingRoom]),
            A::Chair => furniture(&[C::Sittable], &[R::Kitchen, R::DiningRoom, R::Office]),
            A::Bed => furniture(&[C::Sittable, C::Surface], &[R::Bedroom]),
            A::Box => furniture(&[C::Container, C::CanOpen], ANY_ROOM),
            A::Basket => furniture(&[C::Container], &[R::Bathroom, R::Bedroom]),
            A::Cup | A::Plate | A::Bowl | A::Mug | A::Glass => Spec {
                cleanable: true,
                ..item(DISHES)
            },
            A::Book => item(&[A::Bookshelf, A::Desk, A::CoffeeTable, A::Box]),
            A::Laptop => item(&[A::Desk, A::Bed, A::CoffeeTable]),
            A::Rag => Spec {
                cleanable: true,
                ..item(&[A::Cabinet, A::KitchenCounter, A::Basket, A::Sink])
            },
            A::Towel => Spec {
                cleanable: true,
                ..item(&[A::Cabinet, A::Basket, A::Bed])
            },
            A::Toy => item(&[A::Box, A::Basket, A::Bed, A::Sofa]),
            A::RemoteControl => item(&[A::CoffeeTable, A::Sofa, A::Cabinet]),
            A::Apple => Spec {
                heatable: true,
                ..item(&[A::Fridge, A::Table, A::KitchenCounter])
            },
            A::Sandwich => Spec {
                heatable: true,
                ..item(&[A::Fridge, A::Table, A::KitchenCounter])
            },
            A::Phone => item(&[A::Desk, A::CoffeeTable, A::Bed, A::Table]),
            A::Pillow => item(&[A::Bed, A::Sofa, A::Cabinet]),
            A::Keys => item(&[A::Box, A::Desk, A::Table, A::Cabinet]),
        }
    }

    pub fn is_item(self) -> bool {
        self.spec().capabilities.contains(&Capability::Grabbable)
    }

    pub fn has(self, cap: Capability) -> bool {
        self.spec().capabilities.contains(&cap)
    }

    pub fn from_name(name: &str) -> Option<Archetype> {
        Archetype::ALL.iter().copied().find(|a| a.name() == name)
    }

    /// Initial states of a fresh instance; hidden variants are chosen by the
    /// caller.
    pub fn state_slots(self) -> Vec<[State; 2]> {
        let mut slots = Vec::new();
        if self.has(Capability::CanOpen) {
            slots.push([State::Open, State::Closed]);
        }
        if self.has(Capability::HasSwitch) {
            slots.push([State::On, State::Off]);
        }
        let spec = self.spec();
        if spec.pluggable {
            slots.push([State::PluggedIn, State::PluggedOut]);
        }
        if spec.cleanable {
            slots.push([State::Dirty, State::Clean]);
        }
        slots
    }
}

pub fn furniture() -> impl Iterator<Item = Archetype> {
    Archetype::ALL.iter().copied().filter(|a| !a.is_item())
}

pub fn items() -> impl Iterator<Item = Archetype> {
    Archetype::ALL.iter().copied().filter(|a| a.is_item())
}
