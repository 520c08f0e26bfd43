"""
Main API Server - FastAPI surface over the search-and-rescue harness.
"""

import os
from fastapi import FastAPI, HTTPException, BackgroundTasks
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field
from typing import Dict, List, Optional, Any
import uvicorn
from datetime import datetime
import logging

from harness import ExperimentRunner, RunResult, resolve_scenario
from planner import POLICY_NAMES
from spatial.errors import ConfigError
from spatial.settings import LOG_LEVEL

# Configure logging
logging.basicConfig(level=LOG_LEVEL)
logger = logging.getLogger(__name__)

VERSION = "1.0.0"

app = FastAPI(
    title="UAV Search-and-Rescue Planner",
    description="Simulate and benchmark UAV search policies over LGCP injury predictions",
    version=VERSION,
    docs_url="/docs",
    redoc_url="/redoc"
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

runner = ExperimentRunner()

# In-memory run status, lost on restart
run_status: Dict[str, Dict[str, Any]] = {}


class SimulateRequest(BaseModel):
    scenario: str = "B"
    policy: str = "mctsjump"
    seed: int = 0
    scale: str = "desk"
    plans: Optional[int] = Field(None, gt=0)


class BenchRequest(BaseModel):
    scenario: str = "B"
    policies: List[str] = list(POLICY_NAMES)
    reps: int = Field(15, ge=2)
    seed: int = 0
    scale: str = "desk"
    plans: Optional[int] = Field(None, gt=0)
    workers: int = Field(1, ge=1)


class RunStatusResponse(BaseModel):
    task_id: str
    kind: str
    status: str  # "pending", "in_progress", "completed", "failed"
    message: str
    started_at: datetime
    completed_at: Optional[datetime] = None
    result: Optional[Dict[str, Any]] = None
    error: Optional[str] = None


class ScenarioInfo(BaseModel):
    name: str
    grid: List[int]
    objective: str
    truth_layers: Dict[str, List[str]]
    model_layers: Dict[str, Optional[List[str]]]
    sites: List[str]
    replicates: int
    plans: int


class HealthResponse(BaseModel):
    status: str
    timestamp: datetime
    version: str
    uptime: float


start_time = datetime.now()
run_counter = 0


@app.on_event("startup")
async def startup_event():
    os.makedirs(runner.output_dir, exist_ok=True)
    logger.info(f"Output directory: {runner.output_dir}")


@app.get("/health", response_model=HealthResponse)
async def health_check():
    return HealthResponse(
        status="healthy",
        timestamp=datetime.now(),
        version=VERSION,
        uptime=(datetime.now() - start_time).total_seconds()
    )


@app.get("/scenarios/{name}", response_model=ScenarioInfo)
async def get_scenario(name: str, scale: str = "desk"):
    """Describe a built-in scenario at the given scale."""
    try:
        scenario = resolve_scenario(name, scale)
    except ConfigError as e:
        raise HTTPException(status_code=404, detail=str(e))
    return ScenarioInfo(
        name=scenario.name,
        grid=[scenario.nx, scenario.ny],
        objective=scenario.objective,
        truth_layers={role: sorted(t.weights) + (['S'] if t.hyper else []) for role, t in scenario.truth.items()},
        model_layers={
            'population': list(scenario.model_population) + (['S'] if scenario.population_field else []),
            'detection': list(scenario.model_detection),
            'injury': None if scenario.model_injury is None
            else list(scenario.model_injury) + (['S'] if scenario.injury_field else []),
        },
        sites=sorted(scenario.sites),
        replicates=scenario.replicates,
        plans=scenario.plans,
    )


def _new_task(kind: str, message: str) -> str:
    global run_counter
    run_counter += 1
    task_id = f"{kind}_{run_counter}_{int(datetime.now().timestamp())}"
    run_status[task_id] = {
        "task_id": task_id,
        "kind": kind,
        "status": "pending",
        "message": message,
        "started_at": datetime.now(),
        "completed_at": None,
        "result": None,
        "error": None,
    }
    return task_id


def _validate_policies(policies: List[str]):
    unknown = [p for p in policies if p not in POLICY_NAMES]
    if unknown:
        raise HTTPException(status_code=422, detail=f"Unsupported policies: {unknown}")


@app.post("/runs/simulate", response_class=JSONResponse)
async def start_simulation(request: SimulateRequest, background_tasks: BackgroundTasks):
    """Run one episode in the background."""
    _validate_policies([request.policy])
    try:
        scenario = resolve_scenario(request.scenario, request.scale)
    except ConfigError as e:
        raise HTTPException(status_code=404, detail=str(e))

    task_id = _new_task("simulate", "Simulation request received")
    background_tasks.add_task(run_task, task_id,
                              runner.simulate(scenario, request.policy, request.seed, plans=request.plans))
    return {"task_id": task_id, "status": "pending", "check_status_url": f"/runs/{task_id}"}


@app.post("/runs/bench", response_class=JSONResponse)
async def start_bench(request: BenchRequest, background_tasks: BackgroundTasks):
    """Replicate policies in the background."""
    _validate_policies(request.policies)
    try:
        scenario = resolve_scenario(request.scenario, request.scale)
    except ConfigError as e:
        raise HTTPException(status_code=404, detail=str(e))

    task_id = _new_task("bench", "Bench request received")
    background_tasks.add_task(run_task, task_id,
                              runner.bench(scenario, request.policies, request.reps, request.seed,
                                           plans=request.plans, workers=request.workers))
    return {"task_id": task_id, "status": "pending", "check_status_url": f"/runs/{task_id}"}


@app.get("/runs/{task_id}", response_model=RunStatusResponse)
async def get_run_status(task_id: str):
    if task_id not in run_status:
        raise HTTPException(status_code=404, detail="Run not found")
    return RunStatusResponse(**run_status[task_id])


@app.get("/runs", response_class=JSONResponse)
async def list_runs():
    """Tasks of this server process plus the result directories on disk."""
    return {
        "tasks": list(run_status.values()),
        "results": runner.file_writer.list_runs(),
        "total": len(run_status),
    }


async def run_task(task_id: str, job):
    """Await a runner coroutine and record its outcome."""
    run_status[task_id].update({"status": "in_progress", "message": "Running..."})
    try:
        result: RunResult = await job
        if result.success:
            final = {
                "output_path": result.output_path,
                "written_files": result.written_files,
                "warnings": result.warnings,
                "execution_time": result.execution_time,
            }
            if result.summary is not None:
                summary = result.summary.astype(object)
                final["summary"] = summary.where(summary.notna(), None).to_dict(orient="records")
            run_status[task_id].update({
                "status": "completed",
                "message": "Run completed successfully",
                "completed_at": datetime.now(),
                "result": final,
            })
            logger.info(f"Run {task_id} completed")
        else:
            run_status[task_id].update({
                "status": "failed",
                "message": "Run failed",
                "completed_at": datetime.now(),
                "error": "; ".join(result.errors),
            })
            logger.error(f"Run {task_id} failed: {result.errors}")

    except Exception as e:
        run_status[task_id].update({
            "status": "failed",
            "message": "Run failed with error",
            "completed_at": datetime.now(),
            "error": str(e),
        })
        logger.error(f"Run {task_id} failed with exception: {str(e)}")


if __name__ == "__main__":
    host = os.getenv("API_HOST", "0.0.0.0")
    port = int(os.getenv("API_PORT", "8000"))
    debug = os.getenv("DEBUG", "False").lower() == "true"

    uvicorn.run(
        "main_api_server:app",
        host=host,
        port=port,
        reload=debug,
        log_level="info"
    )
