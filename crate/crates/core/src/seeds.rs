//! Seed networks shipped with the crate.

pub const ALEXNET: &str = include_str!("../fixtures/seeds/alexnet.netdsl");
pub const TINY_CNN: &str = include_str!("../fixtures/seeds/tiny_cnn.netdsl");
pub const RESIDUAL: &str = include_str!("../fixtures/seeds/residual.netdsl");
pub const INCEPTION: &str = include_str!("../fixtures/seeds/inception.netdsl");
pub const MOBILE: &str = include_str!("../fixtures/seeds/mobile.netdsl");
pub const MLP: &str = include_str!("../fixtures/seeds/mlp.netdsl");

/// `(file name, text)` for every seed.
pub const ALL: [(&str, &str); 6] = [
    ("alexnet.netdsl", ALEXNET),
    ("tiny_cnn.netdsl", TINY_CNN),
    ("residual.netdsl", RESIDUAL),
    ("inception.netdsl", INCEPTION),
    ("mobile.netdsl", MOBILE),
    ("mlp.netdsl", MLP),
];
