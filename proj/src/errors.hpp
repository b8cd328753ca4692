// Error taxonomy shared by all widefim modules.
//
// ConfigError     -> bad user input (config file, CLI arguments)      exit code 2
// DegenerateError -> a regime the theory declares degenerate          exit code 3
//                    (T<=2 batch norm, C<=2 layer norm, centered
//                    network where a theorem needs kappa2>0,
//                    zero-variance normalization, ...)
// NumericError    -> solver failures, non-finite values               exit code 4
//
// std::invalid_argument / std::domain_error keep their usual meaning of a
// violated call contract.
#pragma once

#include <stdexcept>
#include <string>

namespace widefim {

class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

class DegenerateError : public std::runtime_error {
public:
  explicit DegenerateError(const std::string& what) : std::runtime_error(what) {}
};

class NumericError : public std::runtime_error {
public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace widefim
