// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "atd/tensor.hpp"
#include "atd/autodiff.hpp"
#include "atd/encoders.hpp"
#include "atd/fusion.hpp"
#include "atd/data.hpp"
#include "atd/training.hpp"
#include "atd/config.hpp"
#include "atd/gradcheck_suite.hpp"
