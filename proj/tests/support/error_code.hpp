#pragma once

#include <functional>

#include <gtest/gtest.h>

#include "cosim/error.hpp"

namespace testutil {

inline cosim::ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const cosim::Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected a cosim::Error";
  return cosim::ErrorCode::Io;
}

}  // namespace testutil
