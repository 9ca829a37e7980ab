// Copyright (c) 2026, The forgetlab Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlab/error.hpp"

namespace forgetlab {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::runtime: return "runtime error";
    case ErrorCode::schema: return "schema error";
    case ErrorCode::io: return "io error";
    case ErrorCode::data: return "data error";
    case ErrorCode::numeric: return "numeric failure";
    case ErrorCode::config: return "config error";
    case ErrorCode::input: return "input error";
    case ErrorCode::undefined_value: return "undefined value";
    case ErrorCode::divergence: return "divergence";
    case ErrorCode::conditioning: return "conditioning error";
    case ErrorCode::parse: return "parse error";
    case ErrorCode::shape: return "shape error";
  }
  return "error";
}

}  // namespace forgetlab
