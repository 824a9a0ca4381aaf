#pragma once

#include "bodymetric/checkpoint.hpp"
#include "bodymetric/dataset.hpp"
#include "bodymetric/errors.hpp"
#include "bodymetric/evaluation.hpp"
#include "bodymetric/model.hpp"
#include "bodymetric/numerics.hpp"
#include "bodymetric/scoring.hpp"
#include "bodymetric/training.hpp"
