// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace distflow {

// Base class for everything thrown by this library.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// --- configuration / graph errors -----------------------------------------

class SyntaxError : public Error {
public:
  using Error::Error;
};

class SchemaError : public Error {
public:
  using Error::Error;
};

class CycleError : public Error {
public:
  using Error::Error;
};

class LayoutError : public Error {
public:
  using Error::Error;
};

class CoverageError : public Error {
public:
  using Error::Error;
};

class UnboundNodeError : public Error {
public:
  UnboundNodeError(const std::string& node_id, const std::string& key)
      : Error("no registered function for node '" + node_id + "' (key '" + key + "')"),
        node_id(node_id),
        key(key) {}
  std::string node_id;
  std::string key;
};

class IndivisibleError : public Error {
public:
  IndivisibleError(const std::string& what_divides, long long dividend, long long divisor)
      : Error(what_divides + ": " + std::to_string(divisor) + " does not divide " +
              std::to_string(dividend)) {}
  explicit IndivisibleError(const std::string& msg) : Error(msg) {}
};

// --- transport errors ------------------------------------------------------

class BindError : public Error {
public:
  using Error::Error;
};

class HandshakeError : public Error {
public:
  using Error::Error;
};

class TimeoutError : public Error {
public:
  using Error::Error;
};

class PeerClosedError : public Error {
public:
  using Error::Error;
};

class FrameTooLargeError : public Error {
public:
  using Error::Error;
};

// --- data plane errors -----------------------------------------------------

class IoError : public Error {
public:
  using Error::Error;
};

class ParseError : public Error {
public:
  using Error::Error;
};

class StaleIterationError : public Error {
public:
  using Error::Error;
};

class NotReadyError : public Error {
public:
  using Error::Error;
};

class UnknownStageError : public Error {
public:
  using Error::Error;
};

// --- runtime errors ----------------------------------------------------------

class MissingChannelError : public Error {
public:
  explicit MissingChannelError(const std::string& channel)
      : Error("missing channel '" + channel + "'"), channel(channel) {}
  std::string channel;
};

class MissingRolloutsError : public Error {
public:
  using Error::Error;
};

class FunctionError : public Error {
public:
  FunctionError(const std::string& node_id, const std::string& cause)
      : Error("node '" + node_id + "' failed: " + cause), node_id(node_id) {}
  std::string node_id;
};

class CapacityExceededError : public Error {
public:
  using Error::Error;
};

}  // namespace distflow
