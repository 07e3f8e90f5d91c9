// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "answer_dist.hpp"
#include "backend.hpp"
#include "baselines.hpp"
#include "decoder.hpp"
#include "errors.hpp"
#include "harness.hpp"
#include "numeric.hpp"
#include "oracle.hpp"
#include "remote.hpp"
#include "rng.hpp"
#include "sampling.hpp"
#include "seq.hpp"
#include "sis.hpp"
#include "tabular_model.hpp"
#include "toy_models.hpp"
#include "verify.hpp"
