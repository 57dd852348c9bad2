//! Holds the `acceptance` test target, which checks every acceptance
//! criterion against the library and the command-line driver.
