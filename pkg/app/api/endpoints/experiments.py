"""
Experiment API Endpoints - run pipeline commands over HTTP.
"""
from pathlib import Path
from typing import Any, Optional

from fastapi import APIRouter, Depends, Query
from fastapi.concurrency import run_in_threadpool

from app.api import deps
from app.schemas.experiment import ExperimentConfig
from app.schemas.report import CommandSummary
from app.schemas.response import StandardResponse
from app.services.experiment_service import experiment_service

router = APIRouter()


def _config(config: Optional[ExperimentConfig]) -> ExperimentConfig:
    return config if config is not None else ExperimentConfig()


def _envelope(summary) -> dict:
    return {
        "message": f"{summary.command} completed",
        "data": summary.model_dump(mode="json"),
    }


@router.get("/config", response_model=StandardResponse[ExperimentConfig], summary="Default experiment configuration")
def default_config() -> Any:
    return {"message": "Default configuration", "data": ExperimentConfig().model_dump(mode="json")}


@router.post("/pretrain", response_model=StandardResponse[CommandSummary], summary="Pretrain on low-fidelity pairs")
async def pretrain(
    config: Optional[ExperimentConfig] = None,
    out_dir: Path = Depends(deps.get_output_dir),
) -> Any:
    """
    **Maximum-likelihood pretraining of the conditional flow.**

    Writes the low-fidelity dataset, the checkpoint and the trace under the output directory.
    """
    return _envelope(await run_in_threadpool(experiment_service.pretrain, _config(config), out_dir))


@router.post("/finetune", response_model=StandardResponse[CommandSummary], summary="Preconditioned fine-tuning")
async def finetune(
    config: Optional[ExperimentConfig] = None,
    out_dir: Path = Depends(deps.get_output_dir),
) -> Any:
    """Fine-tunes the pretrained checkpoint found in the output directory."""
    return _envelope(await run_in_threadpool(experiment_service.finetune, _config(config), out_dir))


@router.post("/scratch", response_model=StandardResponse[CommandSummary], summary="From-scratch baseline")
async def scratch(
    config: Optional[ExperimentConfig] = None,
    out_dir: Path = Depends(deps.get_output_dir),
) -> Any:
    return _envelope(await run_in_threadpool(experiment_service.scratch, _config(config), out_dir))


@router.post("/sweep", response_model=StandardResponse[CommandSummary], summary="KL table over gamma")
async def sweep(
    config: Optional[ExperimentConfig] = None,
    out_dir: Path = Depends(deps.get_output_dir),
) -> Any:
    return _envelope(await run_in_threadpool(experiment_service.sweep, _config(config), out_dir))


@router.post("/sample", response_model=StandardResponse[CommandSummary], summary="Sample a trained flow")
async def sample(
    config: Optional[ExperimentConfig] = None,
    out_dir: Path = Depends(deps.get_output_dir),
    n: Optional[int] = Query(None, ge=1, description="Number of samples"),
) -> Any:
    """Samples the fine-tuned checkpoint in the output directory and writes its density grid."""
    return _envelope(await run_in_threadpool(experiment_service.sample, _config(config), out_dir, None, n))


@router.post("/mcmc", response_model=StandardResponse[CommandSummary], summary="SGLD reference chain")
async def mcmc(
    config: Optional[ExperimentConfig] = None,
    out_dir: Path = Depends(deps.get_output_dir),
) -> Any:
    """SGLD and quadrature moments, cross-checked against any fine-tuned or scratch checkpoint in the output directory."""
    return _envelope(await run_in_threadpool(experiment_service.mcmc, _config(config), out_dir))
