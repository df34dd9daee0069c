// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace moep {

/// Coarse error categories. The CLI maps these onto process exit codes.
enum class ErrorKind {
  kShape,
  kConfig,
  kInput,
  kFormat,
  kChecksum,
  kVersion,
  kConsistency,
  kStorage,
  kNumerical,
  kContract,
  kUsage,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kInput: return "input error";
    case ErrorKind::kFormat: return "format error";
    case ErrorKind::kChecksum: return "checksum error";
    case ErrorKind::kVersion: return "version error";
    case ErrorKind::kConsistency: return "consistency error";
    case ErrorKind::kStorage: return "storage error";
    case ErrorKind::kNumerical: return "numerical error";
    case ErrorKind::kContract: return "contract error";
    case ErrorKind::kUsage: return "usage error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define MOEP_DEFINE_ERROR(Name, Base, Kind)                             \
  class Name : public Base {                                           \
   public:                                                             \
    explicit Name(const std::string& what) : Base(Kind, what) {}       \
                                                                       \
   protected:                                                          \
    Name(ErrorKind kind, const std::string& what) : Base(kind, what) {} \
  };

MOEP_DEFINE_ERROR(ShapeError, Error, ErrorKind::kShape)
MOEP_DEFINE_ERROR(ConfigError, Error, ErrorKind::kConfig)
MOEP_DEFINE_ERROR(InputError, Error, ErrorKind::kInput)
MOEP_DEFINE_ERROR(FormatError, Error, ErrorKind::kFormat)
MOEP_DEFINE_ERROR(ChecksumError, FormatError, ErrorKind::kChecksum)
MOEP_DEFINE_ERROR(VersionError, FormatError, ErrorKind::kVersion)
MOEP_DEFINE_ERROR(ConsistencyError, FormatError, ErrorKind::kConsistency)
MOEP_DEFINE_ERROR(StorageError, Error, ErrorKind::kStorage)
MOEP_DEFINE_ERROR(NumericalError, Error, ErrorKind::kNumerical)
MOEP_DEFINE_ERROR(ContractError, Error, ErrorKind::kContract)
MOEP_DEFINE_ERROR(UsageError, Error, ErrorKind::kUsage)

#undef MOEP_DEFINE_ERROR

}  // namespace moep
