#pragma once

#include "featwise/checkpoint.hpp"
#include "featwise/config.hpp"
#include "featwise/encoder.hpp"
#include "featwise/errors.hpp"
#include "featwise/ft_layer.hpp"
#include "featwise/harness.hpp"
#include "featwise/meta_trainer.hpp"
#include "featwise/metric_heads.hpp"
#include "featwise/params.hpp"
#include "featwise/rng.hpp"
#include "featwise/task.hpp"
#include "featwise/tensor.hpp"
