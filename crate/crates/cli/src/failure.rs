use marsnet_core::Error;

/// Why a subcommand stopped. Input problems exit 2, everything else 3.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    pub fn to_json_line(&self) -> String {
        let (kind, message) = match self {
            Failure::Input(m) => ("input", m),
            Failure::Runtime(m) => ("runtime", m),
        };
        serde_json::json!({ "error": { "kind": kind, "exit_code": self.exit_code(), "message": message } }).to_string()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

/// Errors while producing outputs are runtime failures whatever their kind.
pub trait OutputContext<T> {
    fn output(self) -> Result<T, Failure>;
}

impl<T> OutputContext<T> for marsnet_core::Result<T> {
    fn output(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.to_string()))
    }
}
