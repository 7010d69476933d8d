#pragma once

// Umbrella header for the CROP prompt-optimization engine.

#include "crop/baselines.hpp"
#include "crop/common.hpp"
#include "crop/datasets.hpp"
#include "crop/evaluators.hpp"
#include "crop/gateway.hpp"
#include "crop/model.hpp"
#include "crop/optimizer.hpp"
#include "crop/report.hpp"
