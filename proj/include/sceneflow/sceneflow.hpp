#pragma once

#include "sceneflow/geometry.hpp"
#include "sceneflow/nn_index.hpp"
#include "sceneflow/occupancy.hpp"
#include "sceneflow/clustering.hpp"
#include "sceneflow/losses.hpp"
#include "sceneflow/solver.hpp"
#include "sceneflow/metrics.hpp"
#include "sceneflow/synthetic.hpp"
#include "sceneflow/io.hpp"
#include "sceneflow/pipeline.hpp"
