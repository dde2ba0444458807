//! Socket-attribute view of a [`Channel`].
//!
//! Frameworks written against OS sockets expect to query addresses and
//! buffer sizes and to set the usual flags. The facade answers those queries
//! from the channel and its transport endpoint; it carries no data.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::channel::{Channel, ChannelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SocketOption {
    LocalAddress,
    RemoteAddress,
    ReceiveBufferSize,
    SendBufferSize,
    NoDelay,
    KeepAlive,
}

impl SocketOption {
    pub const ALL: [SocketOption; 6] = [
        SocketOption::LocalAddress,
        SocketOption::RemoteAddress,
        SocketOption::ReceiveBufferSize,
        SocketOption::SendBufferSize,
        SocketOption::NoDelay,
        SocketOption::KeepAlive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SocketOption::LocalAddress => "local_address",
            SocketOption::RemoteAddress => "remote_address",
            SocketOption::ReceiveBufferSize => "receive_buffer_size",
            SocketOption::SendBufferSize => "send_buffer_size",
            SocketOption::NoDelay => "no_delay",
            SocketOption::KeepAlive => "keep_alive",
        }
    }
}

impl fmt::Display for SocketOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SocketOption {
    type Err = FacadeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SocketOption::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| FacadeError::UnknownOption(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OptionValue {
    Address(Option<String>),
    Size(usize),
    Flag(bool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetOutcome {
    Accepted,
    /// Valid but without effect, e.g. a buffer size after connect.
    Ignored,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FacadeError {
    #[error("unknown socket option `{0}`")]
    UnknownOption(String),
    #[error("invalid value {value:?} for `{option}`")]
    InvalidValue { option: SocketOption, value: OptionValue },
    #[error("option `{0}` is read-only")]
    ReadOnly(SocketOption),
    #[error("channel is closed")]
    Closed,
}

/// Settable attributes stored with the channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SocketOptions {
    pub receive_buffer_size: usize,
    pub send_buffer_size: usize,
    pub no_delay: bool,
    pub keep_alive: bool,
}

#[derive(Debug, Clone)]
pub struct SocketFacade {
    channel: Channel,
}

impl SocketFacade {
    pub(crate) fn new(channel: Channel) -> Self {
        Self { channel }
    }

    pub fn channel(&self) -> &Channel {
        &self.channel
    }

    pub fn get(&self, option: SocketOption) -> Result<OptionValue, FacadeError> {
        let inner = self.channel.lock();
        if inner.state == ChannelState::Closed {
            return Err(FacadeError::Closed);
        }
        Ok(match option {
            SocketOption::LocalAddress => OptionValue::Address(inner.local_addr.clone()),
            SocketOption::RemoteAddress => OptionValue::Address(inner.remote_addr.clone()),
            SocketOption::ReceiveBufferSize => OptionValue::Size(inner.options.receive_buffer_size),
            SocketOption::SendBufferSize => OptionValue::Size(inner.options.send_buffer_size),
            SocketOption::NoDelay => OptionValue::Flag(inner.options.no_delay),
            SocketOption::KeepAlive => OptionValue::Flag(inner.options.keep_alive),
        })
    }

    pub fn set(&self, option: SocketOption, value: OptionValue) -> Result<SetOutcome, FacadeError> {
        let mut inner = self.channel.lock();
        if inner.state == ChannelState::Closed {
            return Err(FacadeError::Closed);
        }
        let invalid = |value| FacadeError::InvalidValue { option, value };
        match (option, value) {
            (SocketOption::LocalAddress | SocketOption::RemoteAddress, _) => {
                Err(FacadeError::ReadOnly(option))
            }
            (SocketOption::NoDelay, OptionValue::Flag(v)) => {
                inner.options.no_delay = v;
                Ok(SetOutcome::Accepted)
            }
            (SocketOption::KeepAlive, OptionValue::Flag(v)) => {
                inner.options.keep_alive = v;
                Ok(SetOutcome::Accepted)
            }
            (SocketOption::ReceiveBufferSize, OptionValue::Size(n)) if n > 0 => {
                if inner.state != ChannelState::Created {
                    return Ok(SetOutcome::Ignored);
                }
                inner.options.receive_buffer_size = n;
                Ok(SetOutcome::Accepted)
            }
            (SocketOption::SendBufferSize, OptionValue::Size(n)) if n > 0 => {
                if inner.state != ChannelState::Created {
                    return Ok(SetOutcome::Ignored);
                }
                inner
                    .resize_ring(n)
                    .map_err(|_| invalid(OptionValue::Size(n)))?;
                Ok(SetOutcome::Accepted)
            }
            (_, value) => Err(invalid(value)),
        }
    }

    /// [`get`](Self::get) by option name.
    pub fn get_option(&self, name: &str) -> Result<OptionValue, FacadeError> {
        self.get(name.parse()?)
    }

    /// [`set`](Self::set) by option name.
    pub fn set_option(&self, name: &str, value: OptionValue) -> Result<SetOutcome, FacadeError> {
        self.set(name.parse()?, value)
    }

    pub fn local_address(&self) -> Result<Option<String>, FacadeError> {
        match self.get(SocketOption::LocalAddress)? {
            OptionValue::Address(a) => Ok(a),
            _ => unreachable!(),
        }
    }

    pub fn remote_address(&self) -> Result<Option<String>, FacadeError> {
        match self.get(SocketOption::RemoteAddress)? {
            OptionValue::Address(a) => Ok(a),
            _ => unreachable!(),
        }
    }
}
