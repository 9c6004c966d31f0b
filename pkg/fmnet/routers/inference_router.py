from fastapi import APIRouter, HTTPException, UploadFile, File
from fastapi.responses import Response
from pathlib import Path
from typing import Optional
import asyncio
import threading
import structlog

from fmnet.models import MetricsReport, ModelInfoResponse
from fmnet.networks.network import FMNet, count_parameters, predict
from fmnet.pipeline.data import decode_hsi, encode_hsi
from fmnet.pipeline.metrics import evaluate_pairs
from fmnet.pipeline.training import Checkpoint, load_checkpoint, restore_network
from fmnet.utils.config import settings
from fmnet.utils.errors import FmnetError, InputError

logger = structlog.get_logger()
router = APIRouter(prefix="", tags=["Spectral Reconstruction"])


class ModelRegistry:
    """Lazily loads the checkpoint named by settings.checkpoint_path"""

    def __init__(self):
        self._lock = threading.Lock()
        self.net: Optional[FMNet] = None
        self.checkpoint: Optional[Checkpoint] = None
        self.path: Optional[str] = None

    @property
    def loaded(self) -> bool:
        return self.net is not None

    def _load_locked(self, path: str) -> FMNet:
        checkpoint = load_checkpoint(path)
        net = restore_network(checkpoint)
        self.checkpoint = checkpoint
        self.path = str(path)
        # Readers check net first, so it is published last
        self.net = net
        logger.info("Loaded model", path=str(path), epoch=checkpoint.epoch)
        return self.net

    def load(self, path: str) -> FMNet:
        with self._lock:
            return self._load_locked(path)

    def _load_once(self, path: str) -> FMNet:
        # Concurrent first requests wait here and reuse the winner's model
        with self._lock:
            if self.net is None:
                self._load_locked(path)
            return self.net

    async def get(self) -> FMNet:
        net = self.net
        if net is not None:
            return net
        path = settings.checkpoint_path
        if not path:
            raise HTTPException(status_code=503, detail="No checkpoint configured (set FMNET_CHECKPOINT_PATH).")
        try:
            return await asyncio.to_thread(self._load_once, path)
        except FmnetError as e:
            logger.error("Model loading failed", path=path, error=str(e))
            raise HTTPException(status_code=503, detail=f"Model unavailable: {e}")

    def reset(self):
        with self._lock:
            self.net = None
            self.checkpoint = None
            self.path = None


# Global registry instance
model_registry = ModelRegistry()


async def _read_container(upload: UploadFile, what: str):
    payload = await upload.read()
    if len(payload) > settings.MAX_UPLOAD_SIZE:
        raise HTTPException(status_code=413, detail=f"File too large. Max size: {settings.max_upload_size_mb}MB")
    try:
        return decode_hsi(payload, upload.filename or what)
    except InputError as e:
        raise HTTPException(status_code=400, detail=f"Invalid {what} container: {e}")


@router.get("/model-info", response_model=ModelInfoResponse)
async def model_info():
    """Architecture and training state of the served checkpoint"""
    net = await model_registry.get()
    return ModelInfoResponse(
        network=net.config,
        epoch=model_registry.checkpoint.epoch,
        parameter_count=count_parameters(net),
        checkpoint_path=model_registry.path,
    )


@router.post("/infer")
async def infer(file: UploadFile = File(..., description="RGB image as a 3-band HSC1 container")):
    """
    **Spectral reconstruction**

    Accepts a 3×H×W container and returns the reconstructed B×H×W cube in
    the same container format.
    """
    net = await model_registry.get()
    rgb = await _read_container(file, "RGB")
    if rgb.shape[0] != 3:
        raise HTTPException(status_code=400, detail=f"Expected 3 channels, got {rgb.shape[0]}.")
    try:
        hsi = await asyncio.to_thread(predict, net, rgb)
    except InputError as e:
        raise HTTPException(status_code=400, detail=str(e))

    content = encode_hsi(hsi)
    filename = f"{Path(file.filename or 'image').stem}.hsi"
    logger.info("Served inference", shape=hsi.shape, filename=filename)
    return Response(
        content=content,
        media_type="application/octet-stream",
        headers={
            "Content-Disposition": f"attachment; filename={filename}",
            "Content-Length": str(len(content)),
        },
    )


@router.post("/metrics", response_model=MetricsReport)
async def compute_metrics(
    prediction: UploadFile = File(..., description="Reconstructed cube"),
    reference: UploadFile = File(..., description="Ground-truth cube"),
):
    """RMSE, PSNR, SAM and SSIM between two containers"""
    pred = await _read_container(prediction, "prediction")
    gt = await _read_container(reference, "reference")
    try:
        return evaluate_pairs([pred], [gt], [prediction.filename or "prediction"])
    except InputError as e:
        raise HTTPException(status_code=400, detail=str(e))
