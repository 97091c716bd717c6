#pragma once

#include "ntkuq/common.hpp"
#include "ntkuq/data.hpp"
#include "ntkuq/experiment.hpp"
#include "ntkuq/finite_width.hpp"
#include "ntkuq/infwidth.hpp"
#include "ntkuq/io.hpp"
#include "ntkuq/kernels.hpp"
#include "ntkuq/loss_stats.hpp"
#include "ntkuq/parallel.hpp"
#include "ntkuq/posterior.hpp"
#include "ntkuq/scaling.hpp"
