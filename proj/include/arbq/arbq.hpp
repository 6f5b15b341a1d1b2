// Copyright (c) 2026 The arbq Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "arbq/binarize.hpp"
#include "arbq/calib.hpp"
#include "arbq/compensate.hpp"
#include "arbq/errors.hpp"
#include "arbq/io.hpp"
#include "arbq/parallel.hpp"
#include "arbq/partition.hpp"
#include "arbq/pipeline.hpp"
#include "arbq/rowcol.hpp"
#include "arbq/tensor.hpp"
