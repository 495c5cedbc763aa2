import math

from pydantic import BaseModel, Field


# record Schemas

class RoundRecord(BaseModel):
    """Metrics of one communication round, evaluated on the held-out test split."""

    round: int = Field(ge=1)
    global_accuracy: float = Field(ge=0, le=1)
    per_class_accuracy: list[float]
    asr: float | None = Field(default=None, ge=0, le=1)
    selected_update_indices: list[int] | None = None
    malicious_selected: int | None = None
    aggregator: str = "fedavg"
    update_norm: float = 0.0

    def to_row(self) -> dict:
        row = {"round": self.round, "global_acc": self.global_accuracy}
        for c, acc in enumerate(self.per_class_accuracy):
            row[f"acc_class_{c}"] = acc
        row["asr"] = math.nan if self.asr is None else self.asr
        row["aggregator"] = self.aggregator
        row["selected_indices"] = (
            "" if self.selected_update_indices is None else ";".join(str(i) for i in self.selected_update_indices)
        )
        row["malicious_selected"] = "" if self.malicious_selected is None else self.malicious_selected
        row["update_norm"] = self.update_norm
        return row


class PairedSummaryRow(BaseModel):
    """One repetition of a vanilla-versus-boosted comparison; ASR and accuracy are metric-window means."""

    repetition: int
    seed: int
    v_asr: float
    b_asr: float
    ri_asr: float | None
    v_accuracy: float
    b_accuracy: float
    v_final_asr: float
    b_final_asr: float
    v_malicious_selected: float | None = None
    b_malicious_selected: float | None = None
    malicious_clients: list[int]
    intermediate_classes: list[int]

    def to_row(self) -> dict:
        row = self.model_dump()
        row["ri_asr"] = math.nan if self.ri_asr is None else self.ri_asr
        for key in ("v_malicious_selected", "b_malicious_selected"):
            row[key] = math.nan if row[key] is None else row[key]
        row["malicious_clients"] = ";".join(str(c) for c in self.malicious_clients)
        row["intermediate_classes"] = ";".join(str(c) for c in self.intermediate_classes)
        return row


class SweepRow(BaseModel):
    axis: str
    value: str
    status: str = "ok"
    v_asr: float | None = None
    b_asr: float | None = None
    ri_asr: float | None = None
    v_accuracy: float | None = None
    b_accuracy: float | None = None
    error: str = ""

    def to_row(self) -> dict:
        return {k: (math.nan if v is None else v) for k, v in self.model_dump().items()}


class ScanRow(BaseModel):
    source_class: int
    target_class: int
    v_asr: float
    b_asr: float
    ri_asr: float | None

    def to_row(self) -> dict:
        row = self.model_dump()
        row["ri_asr"] = math.nan if self.ri_asr is None else self.ri_asr
        return row
