#pragma once

#include "sell/error.hpp"
#include "sell/kernels.hpp"
#include "sell/linop.hpp"
#include "sell/transforms.hpp"
#include "sell/training.hpp"
#include "sell/budget.hpp"
#include "sell/result.hpp"
#include "sell/analysis.hpp"
#include "sell/experiment.hpp"
