#pragma once

#include <stdexcept>
#include <string>

namespace mfldiv {

// Violated precondition: wrong dimensions, empty inputs, out-of-range parameters.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Singular systems, non-finite state, runaway particles.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent files.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
[[noreturn]] inline void contract_failure(const std::string& what) { throw ContractError(what); }
}  // namespace detail

}  // namespace mfldiv

#define MFLDIV_REQUIRE(cond, msg)                                                   \
  do {                                                                              \
    if (!(cond)) ::mfldiv::detail::contract_failure(std::string(__func__) + ": " + (msg)); \
  } while (0)
