#pragma once

#include "tsnmt/checkpoint.hpp"
#include "tsnmt/config.hpp"
#include "tsnmt/config_file.hpp"
#include "tsnmt/data.hpp"
#include "tsnmt/diagnostics.hpp"
#include "tsnmt/errors.hpp"
#include "tsnmt/evaluation.hpp"
#include "tsnmt/gradcheck.hpp"
#include "tsnmt/inference.hpp"
#include "tsnmt/kernels.hpp"
#include "tsnmt/model.hpp"
#include "tsnmt/objectives.hpp"
#include "tsnmt/ops.hpp"
#include "tsnmt/optimizer.hpp"
#include "tsnmt/random.hpp"
#include "tsnmt/schedule.hpp"
#include "tsnmt/tensor.hpp"
#include "tsnmt/training.hpp"
