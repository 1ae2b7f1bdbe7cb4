// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "danet/config.hpp"
#include "danet/data.hpp"
#include "danet/errors.hpp"
#include "danet/gradcheck.hpp"
#include "danet/image_io.hpp"
#include "danet/losses.hpp"
#include "danet/metrics.hpp"
#include "danet/nn.hpp"
#include "danet/ops.hpp"
#include "danet/optim.hpp"
#include "danet/parallel.hpp"
#include "danet/rng.hpp"
#include "danet/tape.hpp"
#include "danet/tensor.hpp"
#include "danet/train.hpp"
