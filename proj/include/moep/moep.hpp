// Copyright 2026 The moep Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "moep/analysis.hpp"
#include "moep/autograd.hpp"
#include "moep/calibration.hpp"
#include "moep/container.hpp"
#include "moep/distill.hpp"
#include "moep/error.hpp"
#include "moep/mask.hpp"
#include "moep/model.hpp"
#include "moep/model_graph.hpp"
#include "moep/numerics.hpp"
#include "moep/persistence.hpp"
#include "moep/pipeline.hpp"
#include "moep/pruning.hpp"
#include "moep/text.hpp"
#include "moep/train.hpp"
