/*
 * Copyright 2026 The peftlab Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <stdexcept>
#include <string>

namespace peftlab {

/// Base class for every error thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Incompatible matrix shapes; the message names both shapes.
struct ShapeError : Error {
  using Error::Error;
};

/// An operation produced or consumed a NaN/Inf value.
struct NonFiniteError : Error {
  using Error::Error;
};

/// Invalid configuration; the message lists every violated constraint.
struct ConfigError : Error {
  using Error::Error;
};

/// Invalid runtime input (bad token id, step out of range, empty batch).
struct InputError : Error {
  using Error::Error;
};

/// A computation that is undefined for the given data (e.g. zero-norm row).
struct ComputeError : Error {
  using Error::Error;
};

/// File read/write failure.
struct IoError : Error {
  using Error::Error;
};

/// Training loss became non-finite; carries the failing step index.
struct DivergenceError : Error {
  DivergenceError(const std::string& msg, long long step)
      : Error(msg), step(step) {}
  long long step;
};

}  // namespace peftlab
