/*
 * Copyright 2026 The obsv Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef OBSV_ERROR_HPP_
#define OBSV_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace obsv {

enum class ErrorKind {
  kConfig,
  kFormat,
  kCorruption,
  kSchema,
  kData,
  kUndefined,
  kNumerical,
  kDivergence,
  kIo,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kCorruption: return "corruption";
    case ErrorKind::kSchema: return "schema";
    case ErrorKind::kData: return "data";
    case ErrorKind::kUndefined: return "undefined";
    case ErrorKind::kNumerical: return "numerical";
    case ErrorKind::kDivergence: return "divergence";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

// Base of every error raised by the library. The kind drives CLI exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define OBSV_DEFINE_ERROR(Name, Kind)                                    \
  class Name : public Error {                                            \
   public:                                                               \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  }

OBSV_DEFINE_ERROR(ConfigError, kConfig);
OBSV_DEFINE_ERROR(FormatError, kFormat);
OBSV_DEFINE_ERROR(CorruptionError, kCorruption);
OBSV_DEFINE_ERROR(SchemaError, kSchema);
// Insufficient or empty input data.
OBSV_DEFINE_ERROR(DataError, kData);
// A statistic that is mathematically undefined for the given input
// (constant vectors, empty error sets, zero raw correlation, ...).
OBSV_DEFINE_ERROR(UndefinedError, kUndefined);
OBSV_DEFINE_ERROR(NumericalError, kNumerical);
OBSV_DEFINE_ERROR(IoError, kIo);

#undef OBSV_DEFINE_ERROR

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long epoch)
      : Error(ErrorKind::kDivergence, what), epoch_(epoch) {}
  long epoch() const noexcept { return epoch_; }

 private:
  long epoch_;
};

// Process exit codes: 0 ok, 2 config error, 3 data error, 4 numerical error.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return 2;
    case ErrorKind::kNumerical:
    case ErrorKind::kDivergence: return 4;
    default: return 3;
  }
}

}  // namespace obsv

#endif  // OBSV_ERROR_HPP_
