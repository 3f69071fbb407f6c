//! Command-line entry points. Placeholder while the pipeline comes up.

use std::ffi::OsString;

pub fn cli_main<I, T>(_argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    eprintln!("not yet wired");
    1
}
