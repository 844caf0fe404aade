// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace lpn {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes do not fit the operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A malformed or inconsistent file, or a dataset that violates its invariants.
class FormatError : public Error {
public:
    using Error::Error;
};

/// A forward or backward pass produced NaN/Inf.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration value or unknown configuration key.
class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace lpn
