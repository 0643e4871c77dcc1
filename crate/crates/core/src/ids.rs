//! One-based identifiers used at the API boundary.
//!
//! Basket ids, local labels and network ids are all counted from 1, matching
//! the on-disk formats. `index()` converts to a zero-based offset.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! one_based {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub struct $name(pub u32);

        impl $name {
            /// Zero-based offset. Panics on the invalid id 0.
            #[inline]
            pub fn index(self) -> usize {
                assert!(self.0 >= 1, concat!(stringify!($name), " is one-based"));
                (self.0 - 1) as usize
            }

            #[inline]
            pub fn from_index(index: usize) -> Self {
                $name(index as u32 + 1)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

one_based!(
    /// Index of a basket (dataset) among `1..=M`.
    BasketId
);
one_based!(
    /// Class label local to one basket, `1..=N_m`.
    LocalId
);
one_based!(
    /// Position of a class column in the concatenated classifier, `1..=L_M`.
    NetworkId
);
