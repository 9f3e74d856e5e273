#pragma once

#include "percohom/binary_io.hpp"
#include "percohom/cell_problem.hpp"
#include "percohom/errors.hpp"
#include "percohom/estimators.hpp"
#include "percohom/experiment.hpp"
#include "percohom/lattice.hpp"
#include "percohom/rng.hpp"
#include "percohom/solver.hpp"
#include "percohom/stats.hpp"
#include "percohom/walk.hpp"
