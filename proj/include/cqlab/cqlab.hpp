#pragma once

#include "cqlab/autograd.hpp"
#include "cqlab/baselines.hpp"
#include "cqlab/checkpoint.hpp"
#include "cqlab/cli.hpp"
#include "cqlab/colour.hpp"
#include "cqlab/common.hpp"
#include "cqlab/cqformer.hpp"
#include "cqlab/data.hpp"
#include "cqlab/harness.hpp"
#include "cqlab/layers.hpp"
#include "cqlab/objectives.hpp"
#include "cqlab/ops.hpp"
#include "cqlab/png.hpp"
#include "cqlab/recognition.hpp"
#include "cqlab/tensor.hpp"
#include "cqlab/wcs.hpp"
