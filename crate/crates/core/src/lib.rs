pub mod acquisition;
pub mod config;
pub mod benchfuncs;
pub mod diff;
pub mod gp;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod optim;
pub mod oracles;
pub mod runner;
pub mod space;
