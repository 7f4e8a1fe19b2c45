#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace longfilter {

/// Base of every error raised by the library.
class error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// A caller passed an argument outside an operation's domain.
class argument_error : public error {
  public:
    using error::error;
};

/// Invalid or inconsistent configuration (model parameters, config files, vocabularies).
class config_error : public error {
  public:
    using error::error;
};

class io_error : public error {
  public:
    using error::error;
};

/// Request exceeds what the backend is able to compute (e.g. a huge vocabulary table).
class capability_error : public error {
  public:
    using error::error;
};

/// A remote peer answered with something that violates the wire contract.
class protocol_error : public error {
  public:
    using error::error;
};

/// The remote peer could not be reached after all retries.
class transport_error : public error {
  public:
    transport_error(const std::string& what, std::size_t attempts)
        : error(what), attempts_(attempts) {}

    std::size_t attempts() const noexcept { return attempts_; }

  private:
    std::size_t attempts_;
};

}  // namespace longfilter
