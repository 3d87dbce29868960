#pragma once

#include "mnarjm/cohort_data.hpp"
#include "mnarjm/cohort_sim.hpp"
#include "mnarjm/csv_io.hpp"
#include "mnarjm/errors.hpp"
#include "mnarjm/fcs_engine.hpp"
#include "mnarjm/harness.hpp"
#include "mnarjm/joint_model.hpp"
#include "mnarjm/lmm.hpp"
#include "mnarjm/optim.hpp"
#include "mnarjm/pooling_stats.hpp"
#include "mnarjm/quadrature.hpp"
#include "mnarjm/rng.hpp"
