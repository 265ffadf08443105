/* Copyright 2026 The detrack Authors.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Shared fixtures for the unit tests.

#ifndef DETRACK_TESTS_TEST_UTIL_HPP_
#define DETRACK_TESTS_TEST_UTIL_HPP_

#include "detrack/checks.hpp"

namespace detrack::testing {

using checks::Jitter;
using checks::RandomImage;
using checks::RandomPair;
using checks::RandomTensor;
using checks::TinyEncoder;

}  // namespace detrack::testing

#endif  // DETRACK_TESTS_TEST_UTIL_HPP_
