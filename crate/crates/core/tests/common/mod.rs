#![allow(dead_code)]

use std::sync::Arc;

use vrlab_core::api::{DeviceClass, JoinOutcome, JoinRequest, Ticket};
use vrlab_core::clock::ManualClock;
use vrlab_core::dataplane::{DataStore, IdMinter};
use vrlab_core::questionnaire::{Answer, ItemFormat, QuestionnaireSpec, ResponseSet};
use vrlab_core::Platform;

pub fn vr(participant: &str) -> JoinRequest {
    JoinRequest {
        participant_id: participant.to_string(),
        device_class: DeviceClass::Vr,
        device_serial: Some("SN-0001".into()),
    }
}

pub fn platform() -> (Platform, Arc<ManualClock>) {
    let clock = Arc::new(ManualClock::new());
    let p = Platform::builder(DataStore::in_memory())
        .ids(IdMinter::seeded(7))
        .clock(clock.clone())
        .build();
    (p, clock)
}

pub fn admitted(outcome: JoinOutcome) -> Ticket {
    match outcome {
        JoinOutcome::Admitted(t) => *t,
        other => panic!("expected admission, got {other:?}"),
    }
}

pub fn answers_for(spec: &QuestionnaireSpec) -> Vec<Answer> {
    spec.items
        .iter()
        .map(|item| match &item.format {
            _ if !item.required => Answer::Skipped,
            ItemFormat::Likert { min, .. } => Answer::Likert(*min),
            ItemFormat::MultipleChoice { options } => Answer::Choice(options[0].clone()),
            ItemFormat::FreeText { .. } => Answer::Text("30".into()),
        })
        .collect()
}

pub fn respond(p: &Platform, session: &str, questionnaire: &str) {
    let spec = p.questionnaires().get(questionnaire).unwrap();
    p.submit_response(&ResponseSet {
        session_id: session.to_string(),
        questionnaire_id: questionnaire.to_string(),
        version: 0,
        answers: answers_for(&spec),
        submitted_at: 0.0,
    })
    .unwrap();
}
