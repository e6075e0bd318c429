pub mod backend;
pub mod cli;
pub mod executor;
pub mod manifest;
pub mod oracle;
pub mod table;
pub mod validator;
