#pragma once

#include "spe/common.hpp"
#include "spe/data.hpp"
#include "spe/dynsys.hpp"
#include "spe/flow.hpp"
#include "spe/io.hpp"
#include "spe/pipeline.hpp"
#include "spe/train.hpp"
