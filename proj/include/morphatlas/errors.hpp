//
//   Copyright 2026 The morphatlas Authors
//
//   Licensed under the Apache License, Version 2.0 (the "License");
//   you may not use this file except in compliance with the License.
//   You may obtain a copy of the License at
//
//       http://www.apache.org/licenses/LICENSE-2.0
//
//   Unless required by applicable law or agreed to in writing, software
//   distributed under the License is distributed on an "AS IS" BASIS,
//   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
//   See the License for the specific language governing permissions and
//   limitations under the License.

#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace morphatlas {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ShapeMismatch : public Error {
public:
  using Error::Error;
};

class InvalidConfig : public Error {
public:
  using Error::Error;
};

// A map with a nonpositive Jacobian determinant was produced.
class DiffeomorphismViolation : public Error {
public:
  using Error::Error;
};

// Correlation of a constant image is undefined.
class UndefinedCorrelation : public Error {
public:
  using Error::Error;
};

class NonConvergence : public Error {
public:
  NonConvergence(const std::string& what, std::vector<double> energy_trace)
      : Error(what), trace_(std::move(energy_trace)) {}

  const std::vector<double>& trace() const noexcept { return trace_; }

private:
  std::vector<double> trace_;
};

// Raised by prior providers; the message always names subject and iteration.
class ProviderError : public Error {
public:
  using Error::Error;
};

class FormatError : public Error {
public:
  using Error::Error;
};

class UnsupportedFeature : public FormatError {
public:
  UnsupportedFeature(const std::string& field, const std::string& detail)
      : FormatError("unsupported feature in field '" + field + "': " + detail), field_(field) {}

  const std::string& field() const noexcept { return field_; }

private:
  std::string field_;
};

class FileNotFound : public Error {
public:
  using Error::Error;
};

} // namespace morphatlas
