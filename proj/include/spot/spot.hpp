#pragma once

#include "spot/errors.hpp"
#include "spot/tensor.hpp"
#include "spot/ops.hpp"
#include "spot/nn.hpp"
#include "spot/vit.hpp"
#include "spot/checkpoint.hpp"
#include "spot/stats.hpp"
#include "spot/predictor.hpp"
#include "spot/heuristic.hpp"
#include "spot/engine.hpp"
#include "spot/losses.hpp"
#include "spot/flops.hpp"
#include "spot/dataset.hpp"
#include "spot/trainer.hpp"
#include "spot/config.hpp"
#include "spot/overlay.hpp"
