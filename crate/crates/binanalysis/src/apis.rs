//! Bind-family API symbols and their argument layouts.

use std::collections::BTreeSet;

pub const ENV_PREFIX: &str = "ANDROID_SOCKET_";

pub const DEFAULT_SYMBOLS: &[&str] = &[
    "bind",
    "getenv",
    "android_get_control_socket",
    "socket_local_server",
    "socket_local_server_bind",
    "_ZN17FrameworkListenerC1EPKc",
    "_ZN17FrameworkListenerC2EPKc",
    "_ZN17FrameworkListenerC1EPKcb",
    "_ZN17FrameworkListenerC2EPKcb",
    "_ZN14SocketListenerC1EPKcb",
    "_ZN14SocketListenerC2EPKcb",
];

/// Argument layout of a bind-family call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApiShape {
    /// `bind(fd, sockaddr *, len)`
    Sockaddr,
    /// Name argument plus a namespace argument (`ANDROID_SOCKET_NAMESPACE_*`).
    NamedNs { name: usize, ns: usize },
    /// Name of an init-created socket.
    Reserved { name: usize },
    /// `getenv(var)`; only `ANDROID_SOCKET_*` names count.
    Env,
    /// Configured symbol with unknown layout; first argument is the name.
    Generic,
}

pub fn shape_of(symbol: &str) -> ApiShape {
    match symbol {
        "bind" => ApiShape::Sockaddr,
        "socket_local_server" => ApiShape::NamedNs { name: 0, ns: 1 },
        "socket_local_server_bind" => ApiShape::NamedNs { name: 1, ns: 2 },
        "android_get_control_socket" => ApiShape::Reserved { name: 0 },
        "getenv" => ApiShape::Env,
        s if s.starts_with("_ZN17FrameworkListenerC") || s.starts_with("_ZN14SocketListenerC") => {
            ApiShape::Reserved { name: 1 }
        }
        _ => ApiShape::Generic,
    }
}

/// Readable API name for reports.
pub fn display_name(symbol: &str) -> &str {
    if symbol.starts_with("_ZN17FrameworkListenerC") {
        "FrameworkListener"
    } else if symbol.starts_with("_ZN14SocketListenerC") {
        "SocketListener"
    } else {
        symbol
    }
}

pub fn is_bind_api(symbol: &str) -> bool {
    DEFAULT_SYMBOLS.contains(&symbol)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BindApiConfig {
    pub symbols: BTreeSet<String>,
}

impl Default for BindApiConfig {
    fn default() -> Self {
        BindApiConfig { symbols: DEFAULT_SYMBOLS.iter().map(|s| s.to_string()).collect() }
    }
}

impl BindApiConfig {
    /// One symbol per line; blank lines and `#` comments are ignored.
    /// `bind` and `getenv` are always included.
    pub fn from_text(text: &str) -> Self {
        let mut symbols: BTreeSet<String> =
            text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(str::to_string).collect();
        symbols.insert("bind".into());
        symbols.insert("getenv".into());
        BindApiConfig { symbols }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_keeps_core_symbols() {
        let c = BindApiConfig::from_text("# custom\nmy_bind\n\n");
        assert!(c.symbols.contains("my_bind"));
        assert!(c.symbols.contains("bind"));
        assert!(c.symbols.contains("getenv"));
        assert_eq!(shape_of("my_bind"), ApiShape::Generic);
    }

    #[test]
    fn listener_shapes() {
        assert_eq!(shape_of("_ZN17FrameworkListenerC2EPKcb"), ApiShape::Reserved { name: 1 });
        assert_eq!(display_name("_ZN14SocketListenerC1EPKcb"), "SocketListener");
    }
}
